"""Label imbalance ratio, binary SMOTE and multi-label MLSMOTE."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .neighbors import NeighborIndex, knn_indices
from .telemetry import CATEGORIES, Dataset, fit_standardizer, sanitize

__all__ = [
    "ImbalanceReport",
    "NeighborIndex",
    "knn_indices",
    "label_imbalance_ratio",
    "smote_binary",
    "mlsmote",
    "MLSmoteDidNotConverge",
    "resample_dataset",
]

log = logging.getLogger(__name__)


class MLSmoteDidNotConverge(RuntimeError):
    pass


@dataclass(frozen=True)
class ImbalanceReport:
    counts: np.ndarray
    lir: np.ndarray

    @property
    def max_lir(self) -> float:
        return float(self.lir.max())

    def to_dict(self, names=CATEGORIES) -> dict:
        return {n: {"count": int(c), "lir": float(r)} for n, c, r in zip(names, self.counts, self.lir)}


def _lir_from_counts(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=float)
    if (counts <= 0).any():
        raise ValueError("every label needs at least one positive instance")
    return counts.max() / counts


def label_imbalance_ratio(labels) -> ImbalanceReport:
    """Per-label LIR = max label count / label count.

    ``labels`` is an (n, L) bit matrix, or a 1-D vector of per-label counts.
    """
    a = np.asarray(labels)
    counts = a.astype(np.int64) if a.ndim == 1 else a.astype(np.int64).sum(axis=0)
    return ImbalanceReport(counts, _lir_from_counts(counts))


def smote_binary(
    minority: np.ndarray,
    n_pct: int,
    k: int = 5,
    seed: int | np.random.Generator = 0,
    return_origin: bool = False,
):
    """SMOTE over-sampling of a minority point set.

    Each of the T points spawns ``n_pct // 100`` synthetics on segments toward
    randomly chosen members of its k nearest minority neighbors.
    """
    X = np.asarray(minority, dtype=float)
    if n_pct < 0 or n_pct % 100:
        raise ValueError("SMOTE percentage must be a non-negative multiple of 100")
    per_point = n_pct // 100
    T = len(X)
    if per_point == 0:
        empty = np.zeros((0, X.shape[1] if X.ndim == 2 else 0))
        return (empty, np.zeros((0, 2), dtype=np.int64)) if return_origin else empty
    if T < k + 1:
        raise ValueError(f"SMOTE needs at least k+1={k + 1} minority points, got {T}")
    rng = np.random.default_rng(seed)
    nn = knn_indices(X, k)
    out = np.empty((T * per_point, X.shape[1]))
    origin = np.empty((T * per_point, 2), dtype=np.int64)
    row = 0
    for i in range(T):
        for _ in range(per_point):
            j = nn[i, rng.integers(k)]
            alpha = rng.random()
            out[row] = X[i] + alpha * (X[j] - X[i])
            origin[row] = (i, j)
            row += 1
    return (out, origin) if return_origin else out


def _aggregate_labels(Y: np.ndarray, members: np.ndarray) -> np.ndarray:
    # a bit is set when at least half of the seed sample and its neighbors carry it
    votes = Y[members].sum(axis=0)
    return (2 * votes >= len(members)).astype(Y.dtype)


def mlsmote(
    X: np.ndarray,
    Y: np.ndarray,
    k: int = 5,
    lir_critical: float = 1.1,
    seed: int | np.random.Generator = 0,
    max_synthetic: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Multi-label SMOTE.

    Minority labels are over-sampled until every label's imbalance ratio is at
    most ``lir_critical``. Each synthetic interpolates a seed sample toward one
    random neighbor (independent fraction per feature) and takes the labels
    held by at least half of the seed and its k neighbors. Returns the
    augmented ``(X, Y)``; the first ``len(X)`` rows are the originals.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y).astype(np.int8)
    if lir_critical < 1:
        raise ValueError("lir_critical must be >= 1")
    n, L = Y.shape
    counts = Y.sum(axis=0).astype(np.int64)
    if (counts < k + 1).any():
        raise ValueError(f"every label needs at least k+1={k + 1} positive instances")
    if max_synthetic is None:
        max_synthetic = 20 * n
    rng = np.random.default_rng(seed)

    Xs: list[np.ndarray] = [X]
    Ys: list[np.ndarray] = [Y]
    made = 0

    def lir(l: int) -> float:
        return counts.max() / counts[l]

    while any(lir(l) > lir_critical for l in range(L)):
        for l in range(L):
            while lir(l) > lir_critical:
                allX = np.concatenate(Xs) if len(Xs) > 1 else Xs[0]
                allY = np.concatenate(Ys) if len(Ys) > 1 else Ys[0]
                Xs, Ys = [allX], [allY]
                pos = np.flatnonzero(allY[:, l] == 1)
                nn = pos[knn_indices(allX[pos], k)]
                newX, newY = [], []
                for r in rng.permutation(len(pos)):
                    s = pos[r]
                    ref = nn[r, rng.integers(k)]
                    alpha = rng.random(X.shape[1])
                    newX.append(allX[s] + alpha * (allX[ref] - allX[s]))
                    lab = _aggregate_labels(allY, np.concatenate(([s], nn[r])))
                    newY.append(lab)
                    counts += lab
                    made += 1
                    if made > max_synthetic:
                        raise MLSmoteDidNotConverge(
                            f"exceeded {max_synthetic} synthetic samples; LIR={np.round(counts.max() / counts, 3).tolist()}"
                        )
                    if lir(l) <= lir_critical:
                        break
                Xs.append(np.array(newX))
                Ys.append(np.array(newY, dtype=np.int8))
    log.debug("mlsmote generated %d synthetic samples", made)
    return np.concatenate(Xs), np.concatenate(Ys)


def resample_dataset(
    dataset: Dataset,
    mode: str = "multilabel",
    k: int = 5,
    smote_pct: int = 100,
    lir_critical: float = 1.1,
    seed: int = 0,
    max_synthetic: int | None = None,
) -> tuple[Dataset, np.ndarray]:
    """Over-sample a labeled dataset in standardized space.

    ``binary`` SMOTEs the anomalous rows; ``multilabel`` runs MLSMOTE on the
    anomalous rows. Synthetics are mapped back to the raw feature scale,
    projected onto the schema and appended after the originals. Returns the
    augmented dataset and a boolean mask flagging synthetic rows.
    """
    if dataset.labels is None:
        raise ValueError("resampling needs a labeled dataset")
    anomalous = np.flatnonzero(dataset.is_anomalous)
    if len(anomalous) == 0:
        raise ValueError("no anomalous rows to resample")
    std = fit_standardizer(dataset.X[anomalous])
    Z = std.transform(dataset.X[anomalous])
    if mode == "binary":
        synth, origin = smote_binary(Z, smote_pct, k, seed, return_origin=True)
        synth_labels = dataset.labels[anomalous][origin[:, 0]] if len(synth) else np.zeros((0, len(CATEGORIES)))
    elif mode == "multilabel":
        Zaug, Yaug = mlsmote(Z, dataset.labels[anomalous], k, lir_critical, seed, max_synthetic)
        synth, synth_labels = Zaug[len(Z) :], Yaug[len(Z) :]
    else:
        raise ValueError(f"unknown resampling mode {mode!r}")
    raw = sanitize(std.inverse(synth)) if len(synth) else np.zeros((0, dataset.X.shape[1]))
    m = len(raw)
    extra = Dataset(
        tuple(f"synthetic{i:07d}" for i in range(m)),
        np.zeros(m, dtype=np.int64),
        raw,
        np.asarray(synth_labels, dtype=np.int8).reshape(m, len(CATEGORIES)),
    )
    out = Dataset.concat([dataset, extra])
    flags = np.zeros(len(out), dtype=bool)
    flags[len(dataset) :] = True
    return out, flags
