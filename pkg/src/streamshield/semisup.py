"""One-class detectors fit on benign records only.

Every detector standardizes its input with statistics of the benign
training data and produces scores where larger means more anomalous.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .config import ConfigError
from .metrics import nearest_rank_threshold
from .neighbors import knn_query
from .telemetry import Dataset, Standardizer, fit_standardizer

ARTIFACT_VERSION = 1
ALGORITHMS = ("iforest", "lof", "elliptic", "ocsvm")


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class OneClassModel:
    algorithm: str
    params: dict
    standardization: Standardizer
    threshold: float | None = None
    seed: int | None = None
    hyper: dict = field(default_factory=dict)

    def score(self, X) -> np.ndarray:
        """Anomaly scores of raw feature rows."""
        Z = self.standardization.transform(_matrix(X))
        return _SCORERS[self.algorithm](self.params, Z)

    def predict(self, X) -> np.ndarray:
        if self.threshold is None:
            raise ValueError("model has no decision threshold; calibrate it first")
        return (self.score(X) > self.threshold).astype(np.int8)

    def with_threshold(self, threshold: float) -> "OneClassModel":
        return replace(self, threshold=float(threshold))

    def to_dict(self) -> dict:
        return {
            "version": ARTIFACT_VERSION,
            "algorithm": self.algorithm,
            "hyper": self.hyper,
            "seed": self.seed,
            "threshold": self.threshold,
            "standardization": self.standardization.to_dict(),
            "params": {k: _jsonable(v) for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OneClassModel":
        if d.get("version") != ARTIFACT_VERSION:
            raise ValueError(f"unsupported model artifact version {d.get('version')!r}")
        if d.get("algorithm") not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {d.get('algorithm')!r}")
        params = {k: np.asarray(v) if isinstance(v, list) else v for k, v in d["params"].items()}
        return cls(
            d["algorithm"],
            params,
            Standardizer.from_dict(d["standardization"]),
            d.get("threshold"),
            d.get("seed"),
            dict(d.get("hyper", {})),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "OneClassModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return v


def _matrix(X) -> np.ndarray:
    X = X.X if isinstance(X, Dataset) else X
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ConfigError("expected a 2-D feature matrix")
    return X


def _prepare(X, standardization: Standardizer | None) -> tuple[np.ndarray, Standardizer]:
    X = _matrix(X)
    if len(X) == 0:
        raise ConfigError("benign training data is empty")
    std = standardization or fit_standardizer(X)
    return std.transform(X), std


# ---------------------------------------------------------------------------
# Isolation forest


@lru_cache(maxsize=None)
def _harmonic(i: int) -> float:
    return math.fsum(1.0 / j for j in range(1, i + 1))


def average_path_length(m: int) -> float:
    """c(m): mean unsuccessful-search path length in a BST of m keys."""
    if m <= 1:
        return 0.0
    if m == 2:
        return 1.0
    return 2.0 * _harmonic(m - 1) - 2.0 * (m - 1) / m


def _grow_itree(Z: np.ndarray, rng: np.random.Generator, limit: int):
    feature, threshold, left, right, size = [], [], [], [], []

    def grow(idx: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(len(idx))
        if depth >= limit or len(idx) <= 1:
            return node
        sub = Z[idx]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if len(splittable) == 0:
            return node
        f = int(splittable[rng.integers(len(splittable))])
        t = float(rng.uniform(lo[f], hi[f]))
        mask = sub[:, f] < t
        if not mask.any():
            # uniform draw landed exactly on the minimum
            mask = sub[:, f] <= lo[f]
        feature[node], threshold[node] = f, t
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(len(Z)), 0)
    return feature, threshold, left, right, size


def fit_isolation_forest(
    X,
    n_trees: int = 100,
    subsample: int | None = None,
    seed: int = 0,
    standardization: Standardizer | None = None,
) -> OneClassModel:
    Z, std = _prepare(X, standardization)
    n = len(Z)
    if n_trees < 1:
        raise ConfigError("isolation forest needs at least one tree")
    psi = min(256, n) if subsample is None else int(subsample)
    if psi > n:
        raise ConfigError(f"subsample size {psi} exceeds {n} training rows")
    if psi < 2:
        raise ConfigError("subsample size must be at least 2")
    rng = np.random.default_rng(seed)
    limit = math.ceil(math.log2(psi))
    cols: dict[str, list] = {k: [] for k in ("feature", "threshold", "left", "right", "size")}
    roots = []
    for _ in range(n_trees):
        sample = rng.choice(n, size=psi, replace=False)
        parts = _grow_itree(Z[sample], rng, limit)
        offset = len(cols["feature"])
        roots.append(offset)
        f, t, l, r, s = parts
        cols["feature"] += f
        cols["threshold"] += t
        cols["left"] += [c + offset if c >= 0 else -1 for c in l]
        cols["right"] += [c + offset if c >= 0 else -1 for c in r]
        cols["size"] += s
    params = {
        "feature": np.array(cols["feature"], dtype=np.int64),
        "threshold": np.array(cols["threshold"]),
        "left": np.array(cols["left"], dtype=np.int64),
        "right": np.array(cols["right"], dtype=np.int64),
        "size": np.array(cols["size"], dtype=np.int64),
        "roots": np.array(roots, dtype=np.int64),
        "psi": psi,
    }
    return OneClassModel("iforest", params, std, seed=seed, hyper={"n_trees": n_trees, "subsample": psi})


def _iforest_path_lengths(p: dict, Z: np.ndarray) -> np.ndarray:
    feature = np.asarray(p["feature"], dtype=np.int64)
    threshold = np.asarray(p["threshold"], dtype=float)
    left = np.asarray(p["left"], dtype=np.int64)
    right = np.asarray(p["right"], dtype=np.int64)
    size = np.asarray(p["size"], dtype=np.int64)
    roots = np.asarray(p["roots"], dtype=np.int64)
    # adjustment c(size) for every leaf, looked up per node
    adjust = np.array([average_path_length(int(m)) for m in size])
    total = np.zeros(len(Z))
    rows = np.arange(len(Z))
    for root in roots:
        node = np.full(len(Z), root)
        depth = np.zeros(len(Z))
        active = rows[feature[node] >= 0]
        while len(active):
            nd = node[active]
            go_left = Z[active, feature[nd]] < threshold[nd]
            node[active] = np.where(go_left, left[nd], right[nd])
            depth[active] += 1
            active = active[feature[node[active]] >= 0]
        total += depth + adjust[node]
    return total / len(roots)


def _score_iforest(p: dict, Z: np.ndarray) -> np.ndarray:
    return 2.0 ** (-_iforest_path_lengths(p, Z) / average_path_length(int(p["psi"])))


# ---------------------------------------------------------------------------
# Local outlier factor

_LRD_EPS = 1e-10


def fit_lof(X, k: int = 20, standardization: Standardizer | None = None) -> OneClassModel:
    Z, std = _prepare(X, standardization)
    n = len(Z)
    if not 1 <= k < n:
        raise ConfigError(f"k={k} out of range for {n} training rows")
    idx, dist = knn_query(Z, Z, k, exclude_self=True)
    kdist = dist[:, -1]
    reach = np.maximum(kdist[idx], dist)
    lrd = 1.0 / (reach.mean(axis=1) + _LRD_EPS)
    params = {"points": Z, "k": k, "kdist": kdist, "lrd": lrd}
    return OneClassModel("lof", params, std, hyper={"k": k})


def _score_lof(p: dict, Z: np.ndarray) -> np.ndarray:
    points = np.asarray(p["points"], dtype=float)
    kdist = np.asarray(p["kdist"], dtype=float)
    lrd_train = np.asarray(p["lrd"], dtype=float)
    idx, dist = knn_query(points, Z, int(p["k"]))
    reach = np.maximum(kdist[idx], dist)
    lrd = 1.0 / (reach.mean(axis=1) + _LRD_EPS)
    return lrd_train[idx].mean(axis=1) / lrd


# ---------------------------------------------------------------------------
# Elliptic envelope (C-step approximation of the minimum covariance determinant)

_REG = 1e-6


def _location_scatter(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = Z.mean(axis=0)
    C = np.cov(Z, rowvar=False, bias=True).reshape(Z.shape[1], Z.shape[1])
    return mu, C + _REG * np.eye(Z.shape[1])


def _mahalanobis_sq(Z: np.ndarray, mu: np.ndarray, precision: np.ndarray) -> np.ndarray:
    D = Z - mu
    return np.maximum(np.einsum("ij,jk,ik->i", D, precision, D), 0.0)


def fit_elliptic_envelope(
    X,
    contamination: float = 0.05,
    c_steps: int = 10,
    support_fraction: float = 0.75,
    seed: int = 0,
    max_iter: int = 100,
    standardization: Standardizer | None = None,
) -> OneClassModel:
    """Robust Mahalanobis detector.

    Each of ``c_steps`` random restarts draws an h-subset, then alternates
    (fit location/scatter, keep the h rows with smallest distance) until the
    subset stops changing. The fit with the smallest scatter determinant
    wins. The threshold is set at the benign (1 - contamination) quantile of
    training scores.
    """
    Z, std = _prepare(X, standardization)
    n, d = Z.shape
    if not 0 < contamination < 0.5:
        raise ConfigError("contamination must lie in (0, 0.5)")
    if n <= d + 1:
        raise ConfigError(f"need more than {d + 1} rows to estimate a {d}-dimensional covariance")
    if c_steps < 1:
        raise ConfigError("c_steps must be >= 1")
    h = math.ceil(support_fraction * n)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(c_steps):
        subset = np.sort(rng.choice(n, size=h, replace=False))
        for _ in range(max_iter):
            mu, C = _location_scatter(Z[subset])
            try:
                P = np.linalg.inv(C)
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError("covariance singular after regularization") from exc
            nxt = np.sort(np.argsort(_mahalanobis_sq(Z, mu, P), kind="stable")[:h])
            if np.array_equal(nxt, subset):
                break
            subset = nxt
        sign, logdet = np.linalg.slogdet(C)
        if sign <= 0:
            raise np.linalg.LinAlgError("covariance singular after regularization")
        if best is None or logdet < best[0]:
            best = (logdet, mu, C, P)
    _, mu, C, P = best
    params = {"location": mu, "covariance": C, "precision": P}
    model = OneClassModel(
        "elliptic",
        params,
        std,
        seed=seed,
        hyper={"contamination": contamination, "c_steps": c_steps, "support_fraction": support_fraction},
    )
    threshold = nearest_rank_threshold(_score_elliptic(params, Z), 1.0 - contamination)
    return model.with_threshold(threshold)


def _score_elliptic(p: dict, Z: np.ndarray) -> np.ndarray:
    mu = np.asarray(p["location"], dtype=float)
    P = np.asarray(p["precision"], dtype=float)
    return np.sqrt(_mahalanobis_sq(Z, mu, P))


# ---------------------------------------------------------------------------
# One-class SVM in a random Fourier feature space


def median_pairwise_distance(Z: np.ndarray, max_points: int = 1000, seed: int = 0) -> float:
    if len(Z) > max_points:
        Z = Z[np.random.default_rng(seed).choice(len(Z), max_points, replace=False)]
    sq = (Z**2).sum(axis=1)
    D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * Z @ Z.T, 0.0))
    iu = np.triu_indices(len(Z), 1)
    return float(np.median(D[iu])) if len(iu[0]) else 0.0


def _rff(p: dict, Z: np.ndarray) -> np.ndarray:
    W = np.asarray(p["omega"], dtype=float)
    b = np.asarray(p["phase"], dtype=float)
    return math.sqrt(2.0 / W.shape[1]) * np.cos(Z @ W + b)


def fit_ocsvm(
    X,
    nu: float = 0.05,
    rff_dim: int = 512,
    seed: int = 0,
    epochs: int = 200,
    standardization: Standardizer | None = None,
) -> OneClassModel:
    """Primal one-class SVM on random Fourier features of the RBF kernel.

    For fixed w the optimal offset rho is the nu-quantile of the training
    margins, so each epoch sets rho in closed form and takes a subgradient
    step on w with step size 1/t (the objective is 1-strongly convex in w).
    """
    Z, std = _prepare(X, standardization)
    n, d = Z.shape
    if not 0 < nu <= 1:
        raise ConfigError("nu must lie in (0, 1]")
    if rff_dim < 1:
        raise ConfigError("rff_dim must be >= 1")
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    rng = np.random.default_rng(seed)
    bandwidth = median_pairwise_distance(Z, seed=seed)
    if bandwidth <= 0:
        bandwidth = 1.0
    params = {
        "omega": rng.normal(0.0, 1.0 / bandwidth, size=(d, rff_dim)),
        "phase": rng.uniform(0.0, 2 * math.pi, size=rff_dim),
        "bandwidth": bandwidth,
    }
    Phi = _rff(params, Z)
    m = min(int(math.floor(nu * n)), n - 1)

    def objective(w: np.ndarray) -> tuple[float, float, np.ndarray]:
        margin = Phi @ w
        rho = float(np.partition(margin, m)[m])
        hinge = np.maximum(0.0, rho - margin)
        return 0.5 * float(w @ w) + hinge.sum() / (nu * n) - rho, rho, margin

    w = Phi.mean(axis=0)
    obj, rho, margin = objective(w)
    best = (obj, w, rho)
    rising = 0
    for t in range(1, epochs + 1):
        violated = margin < rho
        grad = w - Phi[violated].sum(axis=0) / (nu * n)
        w = w - grad / t
        new_obj, rho, margin = objective(w)
        rising = rising + 1 if new_obj > obj else 0
        if rising >= 10 or not np.isfinite(new_obj):
            raise DivergenceError(f"one-class SVM objective increased for {rising} consecutive epochs")
        obj = new_obj
        if obj < best[0]:
            best = (obj, w, rho)
    params.update(w=best[1], rho=best[2])
    return OneClassModel("ocsvm", params, std, seed=seed, hyper={"nu": nu, "rff_dim": rff_dim, "epochs": epochs})


def _score_ocsvm(p: dict, Z: np.ndarray) -> np.ndarray:
    return float(p["rho"]) - _rff(p, Z) @ np.asarray(p["w"], dtype=float)


_SCORERS = {
    "iforest": _score_iforest,
    "lof": _score_lof,
    "elliptic": _score_elliptic,
    "ocsvm": _score_ocsvm,
}


# ---------------------------------------------------------------------------


def threshold_scores(model: OneClassModel | None, scores, contamination: float, calibration=None):
    """Label scores against a benign-quantile threshold.

    The threshold is the nearest-rank (1 - contamination) quantile of the
    benign ``calibration`` scores (``scores`` themselves when omitted);
    a row is anomalous iff its score is strictly above it. Returns
    ``(bits, threshold)``.
    """
    if not 0 < contamination < 0.5:
        raise ConfigError("contamination must lie in (0, 0.5)")
    scores = np.asarray(scores, dtype=float)
    calib = scores if calibration is None else np.asarray(calibration, dtype=float)
    if len(calib) == 0:
        raise ValueError("calibration set is empty")
    thr = nearest_rank_threshold(calib, 1.0 - contamination)
    return (scores > thr).astype(np.int8), thr


def fit_detector(algorithm: str, X, seed: int = 0, **hyper) -> OneClassModel:
    """Dispatch by algorithm tag with keyword hyperparameters."""
    if algorithm == "iforest":
        return fit_isolation_forest(X, seed=seed, **hyper)
    if algorithm == "lof":
        return fit_lof(X, **hyper)
    if algorithm == "elliptic":
        return fit_elliptic_envelope(X, seed=seed, **hyper)
    if algorithm == "ocsvm":
        return fit_ocsvm(X, seed=seed, **hyper)
    raise ConfigError(f"unknown algorithm {algorithm!r}")
