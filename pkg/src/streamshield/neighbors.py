"""Exact Euclidean k-nearest-neighbor search with deterministic tie-breaking."""

from __future__ import annotations

import numpy as np

_CHUNK = 512


def _sq_dist(A: np.ndarray, B: np.ndarray, B_sq: np.ndarray) -> np.ndarray:
    d = (A**2).sum(axis=1)[:, None] + B_sq[None, :] - 2.0 * (A @ B.T)
    np.maximum(d, 0.0, out=d)
    return d


def knn_query(
    train: np.ndarray,
    queries: np.ndarray,
    k: int,
    exclude_self: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """k nearest training rows for every query row.

    Returns ``(indices, distances)``, each (n_queries, k), ascending by
    distance with ties broken by the lower training index. With
    ``exclude_self`` the queries are the training rows and row i never
    lists itself.
    """
    train = np.asarray(train, dtype=float)
    queries = np.asarray(queries, dtype=float)
    n = len(train)
    avail = n - 1 if exclude_self else n
    if not 1 <= k <= avail:
        raise ValueError(f"k={k} out of range for {n} points")
    B_sq = (train**2).sum(axis=1)
    scale = float(B_sq.max()) if n else 0.0
    out_idx = np.empty((len(queries), k), dtype=np.int64)
    out_dist = np.empty((len(queries), k))
    for start in range(0, len(queries), _CHUNK):
        A = queries[start : start + _CHUNK]
        approx = _sq_dist(A, train, B_sq)
        rows = np.arange(len(A))
        if exclude_self:
            approx[rows, rows + start] = np.inf
        kth = np.partition(approx, k - 1, axis=1)[:, k - 1]
        # the expansion above is only approximate; recompute candidates exactly
        tol = 1e-7 * (1.0 + scale + (A**2).sum(axis=1))
        for r in range(len(A)):
            cand = np.flatnonzero(approx[r] <= kth[r] + tol[r])
            diff = train[cand] - A[r]
            d = np.sqrt((diff * diff).sum(axis=1))
            order = np.lexsort((cand, d))[:k]
            out_idx[start + r] = cand[order]
            out_dist[start + r] = d[order]
    return out_idx, out_dist


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """Neighbor lists of every point among the others (self excluded)."""
    points = np.asarray(points, dtype=float)
    if not 1 <= k < len(points):
        raise ValueError(f"k={k} out of range for {len(points)} points")
    idx, _ = knn_query(points, points, k, exclude_self=True)
    return idx


class NeighborIndex:
    """Stored point set for repeated k-NN queries."""

    def __init__(self, points: np.ndarray, k: int):
        self.points = np.asarray(points, dtype=float)
        if not 1 <= k < len(self.points):
            raise ValueError(f"k={k} out of range for {len(self.points)} points")
        self.k = k

    def neighbors_of_points(self) -> np.ndarray:
        return knn_indices(self.points, self.k)

    def query(self, queries: np.ndarray, k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        return knn_query(self.points, queries, k or self.k)
