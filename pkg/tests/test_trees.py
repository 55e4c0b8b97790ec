import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.tree import DecisionTreeClassifier, DecisionTreeRegressor

from streamshield.trees import Tree, build_cart


def structure(tree: Tree, node: int = 0):
    if tree.feature[node] < 0:
        return None
    return (
        int(tree.feature[node]),
        round(float(tree.threshold[node]), 6),
        structure(tree, int(tree.left[node])),
        structure(tree, int(tree.right[node])),
    )


def sk_structure(t, node: int = 0):
    if t.children_left[node] == -1:
        return None
    return (
        int(t.feature[node]),
        round(float(t.threshold[node]), 6),
        sk_structure(t, t.children_left[node]),
        sk_structure(t, t.children_right[node]),
    )


def gini(counts):
    n = sum(counts)
    return 1 - sum((c / n) ** 2 for c in counts) if n else 0.0


def brute_best_split(X, y):
    """Exhaustive weighted-Gini search over midpoints, ties to (feature, threshold)."""
    n = len(y)
    best = (gini(np.bincount(y, minlength=2)) * n, None, None)
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for lo, hi in zip(vals, vals[1:]):
            t = (lo + hi) / 2
            left = y[X[:, f] <= t]
            right = y[X[:, f] > t]
            imp = gini(np.bincount(left, minlength=2)) * len(left) + gini(np.bincount(right, minlength=2)) * len(right)
            if imp < best[0] - 1e-12:
                best = (imp, f, t)
    return best[1], best[2]


class TestCart:
    def test_pure_input_is_leaf(self):
        t = build_cart(np.arange(6.0)[:, None], np.ones(6, dtype=int), n_classes=2)
        assert t.n_nodes == 1 and t.value[0].tolist() == [0.0, 1.0]

    def test_one_dimensional_split(self):
        t = build_cart(np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0, 0, 1, 1]))
        assert t.feature[0] == 0 and t.threshold[0] == 1.5
        assert (t.predict(np.array([[0.0], [1.0], [2.0], [3.0]])).argmax(axis=1) == [0, 0, 1, 1]).all()

    def test_depth_zero_majority(self):
        t = build_cart(np.arange(5.0)[:, None], np.array([1, 1, 0, 1, 0]), max_depth=0)
        assert t.n_nodes == 1 and t.value[0].argmax() == 1

    def test_tie_prefers_lower_feature(self):
        X = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        t = build_cart(X, np.array([0, 0, 1, 1]))
        assert t.feature[0] == 0

    def test_tie_prefers_lower_threshold(self):
        X = np.array([[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]])
        # splitting at 1.5 or 3.5 isolates the same impurity
        t = build_cart(X, np.array([0, 0, 1, 1, 0, 0]), max_depth=1)
        assert t.threshold[0] == 1.5

    def test_matches_brute_force_root(self, rng):
        for _ in range(30):
            X = rng.integers(0, 6, size=(25, 3)).astype(float)
            y = rng.integers(0, 2, 25)
            if y.min() == y.max():
                continue
            f, thr = brute_best_split(X, y)
            t = build_cart(X, y, max_depth=1, n_classes=2)
            if f is None:
                assert t.n_nodes == 1
            else:
                assert (t.feature[0], t.threshold[0]) == (f, thr)

    def test_matches_sklearn_classifier(self, rng):
        # sklearn works in float32, so keep inputs exactly representable there
        X = rng.normal(size=(300, 4)).astype(np.float32).astype(float)
        y = (X[:, 0] + 0.5 * X[:, 1] ** 2 + 0.3 * rng.normal(size=300) > 0.5).astype(int)
        ours = build_cart(X, y, max_depth=4, min_leaf=3, n_classes=2)
        ref = DecisionTreeClassifier(max_depth=4, min_samples_leaf=3, random_state=0).fit(X, y)
        assert structure(ours) == sk_structure(ref.tree_)
        Q = rng.normal(size=(100, 4)).astype(np.float32).astype(float)
        np.testing.assert_allclose(ours.predict(Q), ref.predict_proba(Q), atol=1e-12)

    def test_matches_sklearn_regressor(self, rng):
        X = rng.normal(size=(200, 3)).astype(np.float32).astype(float)
        y = np.sin(X[:, 0]) + X[:, 2]
        ours = build_cart(X, y, max_depth=3, criterion="mse")
        ref = DecisionTreeRegressor(max_depth=3, random_state=0).fit(X, y)
        assert structure(ours) == sk_structure(ref.tree_)
        np.testing.assert_allclose(ours.predict(X)[:, 0], ref.predict(X), atol=1e-12)

    def test_sample_weight_equals_duplication(self, rng):
        X = rng.normal(size=(40, 2))
        y = (X[:, 0] > 0).astype(int)
        w = rng.integers(0, 3, 40).astype(float)
        rep = np.repeat(np.arange(40), w.astype(int))
        a = build_cart(X, y, sample_weight=w, n_classes=2)
        b = build_cart(X[rep], y[rep], n_classes=2)
        assert structure(a) == structure(b)

    def test_min_leaf_respected(self, rng):
        X = rng.normal(size=(100, 3))
        y = rng.integers(0, 2, 100)
        t = build_cart(X, y, min_leaf=7)
        leaves = t.feature < 0
        assert t.n_samples[leaves].min() >= 7

    def test_dict_round_trip(self, rng):
        X = rng.normal(size=(60, 3))
        t = build_cart(X, (X[:, 1] > 0).astype(int), max_depth=3)
        back = Tree.from_dict(t.to_dict())
        assert np.array_equal(back.predict(X), t.predict(X))

    def test_errors(self):
        with pytest.raises(ValueError):
            build_cart(np.zeros((0, 2)), np.zeros(0))
        with pytest.raises(ValueError):
            build_cart(np.zeros((3, 2)), np.zeros(3), min_leaf=0)
        with pytest.raises(ValueError):
            build_cart(np.zeros((3, 2)), np.zeros(3), criterion="entropy")
        with pytest.raises(ValueError):
            build_cart(np.zeros((3, 2)), np.zeros(3), max_features=1)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_gains_non_negative_and_depth_bounded(self, seed, depth):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(50, 3))
        y = rng.integers(0, 2, 50)
        t = build_cart(X, y, max_depth=depth, n_classes=2)
        assert t.depth <= depth
        assert (t.gain[t.feature >= 0] >= 0).all()

    def test_gain_is_weighted_impurity_decrease(self):
        X = np.array([[0.0], [1.0], [2.0], [3.0]])
        t = build_cart(X, np.array([0, 0, 1, 1]))
        # root Gini 0.5 over 4 samples, children pure
        assert t.gain[0] == pytest.approx(2.0)

    def test_xor_needs_depth_two(self):
        X = np.array(list(itertools.product((0.0, 1.0), repeat=2)) * 5)
        y = (X[:, 0] != X[:, 1]).astype(int)
        t = build_cart(X, y, max_depth=2)
        assert (t.predict(X).argmax(axis=1) == y).all()
