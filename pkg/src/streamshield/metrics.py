"""Binary and multi-label evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

BETAS = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MetricReport:
    """Metric values; fields that do not apply to a task stay ``None``."""

    accuracy: float | None = None
    precision: float | None = None
    recall: float | None = None
    f05: float | None = None
    f1: float | None = None
    f2: float | None = None
    roc_auc: float | None = None
    emr: float | None = None
    hamming_loss: float | None = None
    hamming_score: float | None = None

    # JSON keys follow the result-table column headers
    _KEYS = {
        "accuracy": "accuracy",
        "precision": "precision",
        "recall": "recall",
        "f05": "f05_score",
        "f1": "f1_score",
        "f2": "f2_score",
        "roc_auc": "roc_auc",
        "emr": "emr",
        "hamming_loss": "hamming_loss",
        "hamming_score": "hamming_score",
    }

    def to_dict(self) -> dict[str, float]:
        return {key: getattr(self, attr) for attr, key in self._KEYS.items() if getattr(self, attr) is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{attr: d[key] for attr, key in cls._KEYS.items() if key in d})


def _bits(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool and not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1 values")
    return a.astype(bool)


def _check_lengths(pred, truth) -> None:
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    if len(truth) == 0:
        raise ValueError("empty input")


def fbeta(precision: float, recall: float, beta: float) -> float:
    b2 = beta * beta
    denom = b2 * precision + recall
    if denom == 0:
        return 0.0
    return (1 + b2) * precision * recall / denom


def confusion_matrix(pred, truth) -> ConfusionCounts:
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} truths")
    p = _bits(pred, "predictions")
    t = _bits(truth, "truth")
    return ConfusionCounts(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)),
        tn=int(np.sum(~p & ~t)),
    )


def roc_auc(scores, truth) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie), via average ranks."""
    s = np.asarray(scores, dtype=float)
    t = _bits(truth, "truth")
    if len(s) != len(t):
        raise ValueError("length mismatch between scores and truth")
    n_pos = int(t.sum())
    n_neg = len(t) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC AUC needs both classes present")
    ranks = rankdata(s)
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def binary_metrics(pred, truth, scores=None) -> MetricReport:
    """Accuracy, precision, recall, f-beta scores and (given scores) ROC AUC.

    Precision with no predicted positives is 0 by convention.
    """
    _check_lengths(pred, truth)
    cm = confusion_matrix(pred, truth)
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else 0.0
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    auc = None
    if scores is not None:
        t = _bits(truth, "truth")
        if t.all() or not t.any():
            auc = None
        else:
            auc = roc_auc(scores, t)
    return MetricReport(
        accuracy=cm.accuracy,
        precision=precision,
        recall=recall,
        f05=fbeta(precision, recall, 0.5),
        f1=fbeta(precision, recall, 1.0),
        f2=fbeta(precision, recall, 2.0),
        roc_auc=auc,
    )


def _mean_ratio(num: np.ndarray, den: np.ndarray, both_empty: np.ndarray, width: int) -> float:
    """Mean of num/den per row, correctly rounded.

    Denominators never exceed ``width``, so scaling every term by
    lcm(1..width) makes the sum an exact integer.
    """
    scale = math.lcm(*range(1, width + 1))
    nz = den > 0
    # integer numerator sums grouped by denominator; float64 holds them exactly
    by_den = np.bincount(den[nz], weights=num[nz], minlength=width + 1)
    total = sum(int(by_den[d]) * (scale // d) for d in range(1, width + 1))
    total += scale * int((~nz & both_empty).sum())
    return float(Fraction(total, scale * len(num)))


def multilabel_metrics(pred, truth, scores=None, swap_denominators: bool = False) -> MetricReport:
    """Example-based multi-label metrics over (N, c) bit matrices.

    precision averages |y & y_hat| / |y| and recall |y & y_hat| / |y_hat|
    (``swap_denominators`` exchanges them). A per-sample term with an empty
    denominator counts 1 when truth and prediction are both empty, else 0.
    ROC AUC is the macro average over labels that have both classes.
    """
    _check_lengths(pred, truth)
    P = _bits(pred, "predictions")
    T = _bits(truth, "truth")
    if P.ndim != 2 or P.shape != T.shape:
        raise ValueError("predictions and truth must be (N, c) with equal shapes")
    inter = (P & T).sum(axis=1)
    union = (P | T).sum(axis=1)
    n_true = T.sum(axis=1)
    n_pred = P.sum(axis=1)
    both_empty = union == 0

    prec_den, rec_den = (n_pred, n_true) if swap_denominators else (n_true, n_pred)
    c = T.shape[1]
    precision = _mean_ratio(inter, prec_den, both_empty, c)
    recall = _mean_ratio(inter, rec_den, both_empty, c)
    hamming_score = _mean_ratio(inter, union, both_empty, c)

    auc = None
    if scores is not None:
        S = np.asarray(scores, dtype=float)
        per_label = [roc_auc(S[:, j], T[:, j]) for j in range(T.shape[1]) if 0 < T[:, j].sum() < len(T)]
        auc = float(np.mean(per_label)) if per_label else None

    return MetricReport(
        precision=precision,
        recall=recall,
        f05=fbeta(precision, recall, 0.5),
        f1=fbeta(precision, recall, 1.0),
        f2=fbeta(precision, recall, 2.0),
        roc_auc=auc,
        emr=float(np.all(P == T, axis=1).mean()),
        hamming_loss=float((P != T).mean()),
        hamming_score=hamming_score,
    )


def nearest_rank_threshold(scores: Sequence[float], quantile: float) -> float:
    """Smallest score s such that at least ``quantile`` of the scores are <= s."""
    s = np.sort(np.asarray(scores, dtype=float))
    if len(s) == 0:
        raise ValueError("empty calibration set")
    if not 0 < quantile <= 1:
        raise ValueError("quantile must lie in (0, 1]")
    rank = int(np.ceil(quantile * len(s) - 1e-9))
    return float(s[max(rank, 1) - 1])
