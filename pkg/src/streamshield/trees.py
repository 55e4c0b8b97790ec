"""CART construction on presorted feature columns."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# relative tolerance used when comparing split gains, so ties resolve by
# feature index / threshold regardless of summation order
_GAIN_RTOL = 1e-10


@dataclass
class Tree:
    """Flat binary tree; node 0 is the root, ``feature == -1`` marks a leaf.

    ``value`` holds the class distribution (classification) or the mean
    target (regression) of every node; ``gain`` the impurity decrease of
    each split, weighted by node size.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of X (x <= threshold goes left)."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def feature_gains(self, n_features: int) -> np.ndarray:
        out = np.zeros(n_features)
        internal = self.feature >= 0
        np.add.at(out, self.feature[internal], self.gain[internal])
        return out

    def to_dict(self, node: int = 0) -> dict:
        d = {
            "n_samples": float(self.n_samples[node]),
            "value": [float(v) for v in self.value[node]],
        }
        if self.feature[node] >= 0:
            d.update(
                feature=int(self.feature[node]),
                threshold=float(self.threshold[node]),
                gain=float(self.gain[node]),
                left=self.to_dict(int(self.left[node])),
                right=self.to_dict(int(self.right[node])),
            )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        b = _Builder()

        def walk(node: dict) -> int:
            i = b.add(np.asarray(node["value"], dtype=float), node["n_samples"])
            if "feature" in node:
                left = walk(node["left"])
                right = walk(node["right"])
                b.split(i, node["feature"], node["threshold"], node["gain"], left, right)
            return i

        walk(d)
        return b.finish()


class _Builder:
    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[np.ndarray] = []
        self.n_samples: list[float] = []
        self.gain: list[float] = []

    def add(self, value: np.ndarray, n: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        self.n_samples.append(float(n))
        self.gain.append(0.0)
        return len(self.feature) - 1

    def split(self, i: int, feature: int, threshold: float, gain: float, left: int, right: int) -> None:
        self.feature[i] = feature
        self.threshold[i] = threshold
        self.gain[i] = gain
        self.left[i] = left
        self.right[i] = right

    def finish(self) -> Tree:
        return Tree(
            np.array(self.feature, dtype=np.int64),
            np.array(self.threshold, dtype=float),
            np.array(self.left, dtype=np.int64),
            np.array(self.right, dtype=np.int64),
            np.array(self.value, dtype=float).reshape(len(self.feature), -1),
            np.array(self.n_samples, dtype=float),
            np.array(self.gain, dtype=float),
        )


def presort(X: np.ndarray) -> np.ndarray:
    """Row order of every column, shape (n_features, n)."""
    return np.argsort(X, axis=0, kind="stable").T.copy()


def build_cart(
    X: np.ndarray,
    y: np.ndarray,
    max_depth: int | None = None,
    min_leaf: int = 1,
    criterion: str = "gini",
    sample_weight: np.ndarray | None = None,
    max_features: int | None = None,
    rng: np.random.Generator | None = None,
    order: np.ndarray | None = None,
    n_classes: int | None = None,
) -> Tree:
    """Greedy CART.

    ``criterion`` is ``"gini"`` (integer class labels in ``y``) or ``"mse"``
    (real targets). Candidate thresholds are midpoints between consecutive
    distinct values. Ties between equally good splits go to the lower feature
    index, then the lower threshold. ``sample_weight`` (e.g. bootstrap
    counts) weights rows; zero-weight rows are ignored. ``max_features``
    restricts each split to a random feature subset drawn from ``rng``.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if n == 0:
        raise ValueError("cannot build a tree on empty data")
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    if max_depth is not None and max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    if criterion not in ("gini", "mse"):
        raise ValueError(f"unknown criterion {criterion!r}")
    if max_features is not None and not 1 <= max_features <= d:
        raise ValueError("max_features out of range")
    if max_features is not None and max_features < d and rng is None:
        raise ValueError("feature subsampling needs an rng")
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    if order is None:
        order = presort(X)

    if criterion == "gini":
        y = np.asarray(y).astype(np.int64)
        k = int(n_classes if n_classes is not None else y.max() + 1)
        # weighted one-hot targets; the last column carries the weight itself
        stats = np.zeros((n, k + 1))
        stats[np.arange(n), y] = w
        stats[:, k] = w
    else:
        y = np.asarray(y, dtype=float)
        stats = np.column_stack([w * y, w * y * y, w])

    # columns whose running sums decide the split: class weights (or w*y) and w
    first = np.arange(stats.shape[1]) if criterion == "gini" else np.array([0, 2])
    moments = np.ascontiguousarray(stats[:, first].T)
    keep = w > 0
    root_cols = np.vstack([o[keep[o]] for o in order])
    max_depth = np.inf if max_depth is None else max_depth
    all_features = np.arange(d)
    b = _Builder()

    def node_value(tot: np.ndarray) -> np.ndarray:
        if criterion == "gini":
            return tot[:-1] / tot[-1]
        return np.array([tot[0] / tot[2]])

    def impurity_total(tot: np.ndarray) -> float:
        # impurity multiplied by node weight
        if criterion == "gini":
            return float(tot[-1] - (tot[:-1] ** 2).sum() / tot[-1])
        return float(max(tot[1] - tot[0] ** 2 / tot[2], 0.0))

    def best_split(cols: np.ndarray, tot: np.ndarray, parent: float):
        feats = all_features
        if max_features is not None and max_features < d:
            feats = np.sort(rng.choice(d, size=max_features, replace=False))
        idx = cols[feats]  # (F, m) row ids, each row sorted by its feature
        v = X[idx, feats[:, None]]
        # (S, F, m-1) running totals of the left child for every cut position
        cum = np.cumsum(moments[:, idx], axis=-1)[..., :-1]
        wl = cum[-1]
        wr = tot[-1] - wl
        ok = (v[:, 1:] > v[:, :-1]) & (wl >= min_leaf) & (wr >= min_leaf)
        # candidates in (feature, position) order, i.e. lower feature then lower threshold
        cand = np.flatnonzero(ok)
        if len(cand) == 0:
            return None
        left = cum.reshape(len(first), -1)[:, cand]
        right = tot[first][:, None] - left
        # the gain only needs the first moments; the squared terms cancel
        fit = (left[:-1] ** 2).sum(axis=0) / left[-1] + (right[:-1] ** 2).sum(axis=0) / right[-1]
        gain = fit - (tot[first][:-1] ** 2).sum() / tot[-1]
        j = int(np.flatnonzero(gain >= gain.max() - _GAIN_RTOL * max(parent, 1e-300))[0])
        fi, pos = divmod(int(cand[j]), idx.shape[1] - 1)
        return float(gain[j]), int(feats[fi]), 0.5 * (v[fi, pos] + v[fi, pos + 1])

    def grow(cols: np.ndarray, depth: int) -> int:
        idx0 = cols[0]
        tot = stats[idx0].sum(axis=0)
        i = b.add(node_value(tot), tot[-1])
        parent = impurity_total(tot)
        if depth >= max_depth or tot[-1] < 2 * min_leaf or parent <= 1e-12 * tot[-1] or len(idx0) < 2:
            return i
        # a zero-gain split is still taken; only depth, min_leaf and purity stop growth
        best = best_split(cols, tot, parent)
        if best is None:
            return i
        gain, f, thr = best
        goes_left = np.zeros(n, dtype=bool)
        goes_left[idx0[X[idx0, f] <= thr]] = True
        mask = goes_left[cols]
        n_left = int(mask[0].sum())
        # every row of cols holds the same samples, so each keeps n_left of them
        left = grow(cols[mask].reshape(d, n_left), depth + 1)
        right = grow(cols[~mask].reshape(d, len(idx0) - n_left), depth + 1)
        b.split(i, f, thr, max(gain, 0.0), left, right)
        return i

    grow(root_cols, 0)
    return b.finish()
