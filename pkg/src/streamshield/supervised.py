"""Binary classifiers, binary-relevance multi-label wrapping and tree feature importance.

Every binary model emits a score in [0, 1]; the predicted bit is
``score > 0.5``, so exact ties fall to the negative class.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logsumexp

from .neighbors import knn_query
from .telemetry import CATEGORIES, Standardizer
from .trees import Tree, build_cart, presort

ARTIFACT_VERSION = 1
TREE_ALGORITHMS = ("cart", "random_forest", "gradient_boosting")
SIMPLE_ALGORITHMS = ("knn", "nearest_centroid", "gaussian_nb", "qda")
ALGORITHMS = TREE_ALGORITHMS + SIMPLE_ALGORITHMS

NB_VAR_FLOOR = 1e-9
QDA_REG = 1e-6


@dataclass(frozen=True)
class ClassifierModel:
    algorithm: str
    state: dict
    hyper: dict = field(default_factory=dict)
    seed: int | None = None
    standardization: Standardizer | None = None

    def _input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X if self.standardization is None else self.standardization.transform(X)

    def score(self, X) -> np.ndarray:
        return _SCORERS[self.algorithm](self.state, self._input(X))

    def predict(self, X) -> np.ndarray:
        return (self.score(X) > 0.5).astype(np.int8)

    @property
    def trees(self) -> list[Tree]:
        if self.algorithm not in TREE_ALGORITHMS:
            raise TypeError(f"{self.algorithm} is not a tree model")
        return self.state["trees"]

    def to_dict(self) -> dict:
        state = dict(self.state)
        if "trees" in state:
            state["trees"] = [t.to_dict() for t in state["trees"]]
        state = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in state.items()}
        return {
            "version": ARTIFACT_VERSION,
            "algorithm": self.algorithm,
            "hyper": self.hyper,
            "seed": self.seed,
            "standardization": None if self.standardization is None else self.standardization.to_dict(),
            "state": state,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierModel":
        if d.get("version") != ARTIFACT_VERSION:
            raise ValueError(f"unsupported classifier artifact version {d.get('version')!r}")
        if d.get("algorithm") not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {d.get('algorithm')!r}")
        state = {}
        for k, v in d["state"].items():
            if k == "trees":
                state[k] = [Tree.from_dict(t) for t in v]
            elif isinstance(v, list):
                state[k] = np.asarray(v, dtype=float)
            else:
                state[k] = v
        std = d.get("standardization")
        return cls(d["algorithm"], state, dict(d.get("hyper", {})), d.get("seed"), None if std is None else Standardizer.from_dict(std))


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("training data must be a non-empty 2-D matrix")
    if len(y) != len(X):
        raise ValueError("labels and data differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("binary labels must be 0/1")
    return X, y.astype(np.int64)


# ---------------------------------------------------------------------------
# Trees


def train_cart(X, y, max_depth: int | None = None, min_leaf: int = 1) -> ClassifierModel:
    X, y = _check_xy(X, y)
    tree = build_cart(X, y, max_depth=max_depth, min_leaf=min_leaf, criterion="gini", n_classes=2)
    return ClassifierModel("cart", {"trees": [tree], "n_features": X.shape[1]}, {"max_depth": max_depth, "min_leaf": min_leaf})


def _score_cart(state: dict, X: np.ndarray) -> np.ndarray:
    return state["trees"][0].predict(X)[:, 1]


def train_random_forest(
    X,
    y,
    n_trees: int = 100,
    max_depth: int | None = None,
    features_per_split: int | None = None,
    min_leaf: int = 1,
    bootstrap: bool = True,
    seed: int = 0,
) -> ClassifierModel:
    X, y = _check_xy(X, y)
    n, d = X.shape
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    m = math.ceil(math.sqrt(d)) if features_per_split is None else int(features_per_split)
    order = presort(X)
    trees = []
    # one independent stream per tree index
    for child in np.random.SeedSequence(seed).spawn(n_trees):
        rng = np.random.default_rng(child)
        weight = np.bincount(rng.integers(n, size=n), minlength=n).astype(float) if bootstrap else None
        trees.append(
            build_cart(
                X, y, max_depth=max_depth, min_leaf=min_leaf, criterion="gini",
                sample_weight=weight, max_features=m, rng=rng, order=order, n_classes=2,
            )
        )
    hyper = {"n_trees": n_trees, "max_depth": max_depth, "features_per_split": m, "min_leaf": min_leaf, "bootstrap": bootstrap}
    return ClassifierModel("random_forest", {"trees": trees, "n_features": d}, hyper, seed)


def _score_forest(state: dict, X: np.ndarray) -> np.ndarray:
    trees = state["trees"]
    return sum(t.predict(X)[:, 1] for t in trees) / len(trees)


def train_gradient_boosting(
    X,
    y,
    rounds: int = 100,
    learning_rate: float = 0.1,
    max_depth: int = 3,
    min_leaf: int = 1,
    seed: int = 0,
    history: list | None = None,
) -> ClassifierModel:
    """Logistic boosting: each round fits a regression tree to y - sigmoid(F).

    The residual tree fixes the partition; each leaf then takes one Newton
    step, sum(r) / sum(p(1 - p)), over its rows. Pass a list as ``history``
    to collect the training log-loss after every round.
    """
    X, y = _check_xy(X, y)
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if not learning_rate > 0:
        raise ValueError("learning_rate must be positive")
    hyper = {"rounds": rounds, "learning_rate": learning_rate, "max_depth": max_depth, "min_leaf": min_leaf}
    rate = float(y.mean())
    if rate in (0.0, 1.0):
        warnings.warn("single-class labels; returning a constant model", RuntimeWarning, stacklevel=2)
        return ClassifierModel("gradient_boosting", {"trees": [], "constant": rate, "init": 0.0, "learning_rate": learning_rate, "n_features": X.shape[1]}, hyper, seed)
    init = math.log(rate / (1 - rate))
    F = np.full(len(X), init)
    order = presort(X)
    trees = []
    for _ in range(rounds):
        p = expit(F)
        residual = y - p
        tree = build_cart(X, residual, max_depth=max_depth, min_leaf=min_leaf, criterion="mse", order=order)
        _newton_leaves(tree, tree.apply(X), residual, p * (1 - p))
        trees.append(tree)
        F += learning_rate * tree.predict(X)[:, 0]
        if history is not None:
            history.append(log_loss(y, expit(F)))
    return ClassifierModel("gradient_boosting", {"trees": trees, "init": init, "constant": None, "learning_rate": learning_rate, "n_features": X.shape[1]}, hyper, seed)


def _newton_leaves(tree, leaf: np.ndarray, residual: np.ndarray, hess: np.ndarray) -> None:
    num = np.bincount(leaf, residual, minlength=tree.n_nodes)
    den = np.bincount(leaf, hess, minlength=tree.n_nodes)
    for node in np.unique(leaf):
        tree.value[node, 0] = num[node] / den[node] if den[node] > 1e-150 else 0.0


def log_loss(y, p) -> float:
    p = np.clip(np.asarray(p, dtype=float), 1e-15, 1 - 1e-15)
    y = np.asarray(y, dtype=float)
    return float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).mean())


def _score_boosting(state: dict, X: np.ndarray) -> np.ndarray:
    if state.get("constant") is not None:
        return np.full(len(X), float(state["constant"]))
    F = np.full(len(X), float(state["init"]))
    for t in state["trees"]:
        F += float(state["learning_rate"]) * t.predict(X)[:, 0]
    return expit(F)


# ---------------------------------------------------------------------------
# Simple classifiers


def _need_both_classes(y: np.ndarray, kind: str) -> None:
    if y.min() == y.max():
        raise ValueError(f"{kind} needs at least one sample of each class")


def train_simple_classifier(kind: str, X, y, k: int = 5) -> ClassifierModel:
    X, y = _check_xy(X, y)
    if kind == "knn":
        if not 1 <= k <= len(X):
            raise ValueError(f"k={k} out of range for {len(X)} training rows")
        return ClassifierModel("knn", {"points": X, "labels": y.astype(float), "k": int(k)}, {"k": int(k)})
    _need_both_classes(y, kind)
    groups = [X[y == c] for c in (0, 1)]
    if kind == "nearest_centroid":
        return ClassifierModel("nearest_centroid", {"centroids": np.array([g.mean(axis=0) for g in groups])})
    priors = np.log(np.array([len(g) for g in groups], dtype=float) / len(X))
    if kind == "gaussian_nb":
        means = np.array([g.mean(axis=0) for g in groups])
        var = np.maximum(np.array([g.var(axis=0) for g in groups]), NB_VAR_FLOOR)
        return ClassifierModel("gaussian_nb", {"means": means, "vars": var, "log_priors": priors})
    if kind == "qda":
        if min(len(g) for g in groups) < 2:
            raise ValueError("qda needs at least two samples per class")
        d = X.shape[1]
        means = np.array([g.mean(axis=0) for g in groups])
        covs = np.array([np.cov(g, rowvar=False).reshape(d, d) + QDA_REG * np.eye(d) for g in groups])
        return ClassifierModel("qda", {"means": means, "covs": covs, "log_priors": priors}, {"reg": QDA_REG})
    raise ValueError(f"unknown classifier kind {kind!r}")


def _score_knn(state: dict, X: np.ndarray) -> np.ndarray:
    idx, _ = knn_query(np.asarray(state["points"]), X, int(state["k"]))
    return np.asarray(state["labels"])[idx].mean(axis=1)


def _score_centroid(state: dict, X: np.ndarray) -> np.ndarray:
    C = np.asarray(state["centroids"])
    d0 = np.linalg.norm(X - C[0], axis=1)
    d1 = np.linalg.norm(X - C[1], axis=1)
    total = d0 + d1
    # a point sitting on both centroids is a tie
    return np.divide(d0, total, out=np.full(len(X), 0.5), where=total > 0)


def _posterior(log_joint: np.ndarray) -> np.ndarray:
    return np.exp(log_joint[:, 1] - logsumexp(log_joint, axis=1))


def _score_nb(state: dict, X: np.ndarray) -> np.ndarray:
    means, var = np.asarray(state["means"]), np.asarray(state["vars"])
    lj = np.column_stack([
        np.asarray(state["log_priors"])[c]
        - 0.5 * (np.log(2 * np.pi * var[c]) + (X - means[c]) ** 2 / var[c]).sum(axis=1)
        for c in (0, 1)
    ])
    return _posterior(lj)


def _score_qda(state: dict, X: np.ndarray) -> np.ndarray:
    means, covs = np.asarray(state["means"]), np.asarray(state["covs"])
    cols = []
    for c in (0, 1):
        _, logdet = np.linalg.slogdet(covs[c])
        D = X - means[c]
        maha = np.einsum("ij,ij->i", D, np.linalg.solve(covs[c], D.T).T)
        cols.append(np.asarray(state["log_priors"])[c] - 0.5 * (logdet + maha))
    return _posterior(np.column_stack(cols))


_SCORERS = {
    "cart": _score_cart,
    "random_forest": _score_forest,
    "gradient_boosting": _score_boosting,
    "knn": _score_knn,
    "nearest_centroid": _score_centroid,
    "gaussian_nb": _score_nb,
    "qda": _score_qda,
}


def train_classifier(
    algorithm: str,
    X,
    y,
    seed: int = 0,
    standardization: Standardizer | None = None,
    **hyper,
) -> ClassifierModel:
    """Dispatch by algorithm tag. With ``standardization`` the model trains
    on, and later scores, standardized inputs."""
    X = np.asarray(X, dtype=float)
    if standardization is not None:
        X = standardization.transform(X)
    if algorithm == "cart":
        model = train_cart(X, y, **hyper)
    elif algorithm == "random_forest":
        model = train_random_forest(X, y, seed=seed, **hyper)
    elif algorithm == "gradient_boosting":
        model = train_gradient_boosting(X, y, seed=seed, **hyper)
    elif algorithm in SIMPLE_ALGORITHMS:
        model = train_simple_classifier(algorithm, X, y, **hyper)
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    return replace(model, standardization=standardization)


# ---------------------------------------------------------------------------
# Multi-label


@dataclass(frozen=True)
class MultiLabelModel:
    models: tuple[ClassifierModel, ...]
    labels: tuple[str, ...] = CATEGORIES

    def __post_init__(self):
        if len(self.models) != len(self.labels):
            raise ValueError("one submodel per label")

    def score(self, X) -> np.ndarray:
        return np.column_stack([m.score(X) for m in self.models])

    def predict(self, X) -> np.ndarray:
        return np.column_stack([m.predict(X) for m in self.models]).astype(np.int8)

    def to_dict(self) -> dict:
        return {"version": ARTIFACT_VERSION, "labels": list(self.labels), "models": [m.to_dict() for m in self.models]}

    @classmethod
    def from_dict(cls, d: dict) -> "MultiLabelModel":
        return cls(tuple(ClassifierModel.from_dict(m) for m in d["models"]), tuple(d["labels"]))


def wrap_binary_relevance(algorithm: str, X, Y, seed: int = 0, standardization: Standardizer | None = None, **hyper) -> MultiLabelModel:
    """One independent binary model per fraud category."""
    Y = np.asarray(Y)
    if Y.ndim != 2 or Y.shape[1] != len(CATEGORIES):
        raise ValueError(f"expected an (n, {len(CATEGORIES)}) label matrix")
    for j, name in enumerate(CATEGORIES):
        col = Y[:, j]
        if col.min() == col.max():
            raise ValueError(f"label {name!r} has a single class in the training data")
    return MultiLabelModel(
        tuple(train_classifier(algorithm, X, Y[:, j], seed=seed, standardization=standardization, **hyper) for j in range(len(CATEGORIES)))
    )


# ---------------------------------------------------------------------------


def feature_importance_nfiv(model: ClassifierModel | MultiLabelModel, n_features: int | None = None) -> np.ndarray:
    """Total split gain per feature over all trees, normalized to sum 1.

    Returns one row per label for a MultiLabelModel. All zeros when the model
    never splits.
    """
    if isinstance(model, MultiLabelModel):
        return np.vstack([feature_importance_nfiv(m, n_features) for m in model.models])
    trees = model.trees
    n_features = int(model.state["n_features"]) if n_features is None else n_features
    total = np.zeros(n_features)
    for t in trees:
        total += t.feature_gains(n_features)
    s = total.sum()
    return total / s if s > 0 else total


def save_model(model: ClassifierModel | MultiLabelModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, sort_keys=True)


def load_model(path) -> ClassifierModel | MultiLabelModel:
    with open(path) as fh:
        d = json.load(fh)
    return MultiLabelModel.from_dict(d) if "models" in d else ClassifierModel.from_dict(d)
