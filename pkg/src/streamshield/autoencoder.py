"""Fully connected autoencoder with additive mirror skips, trained by Adam on MSE."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import nearest_rank_threshold
from .telemetry import N_FEATURES, Dataset, Standardizer, fit_standardizer

ARTIFACT_VERSION = 1
DEFAULT_WIDTHS = (N_FEATURES, 16, 8, 4, 8, 16, N_FEATURES)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class AeArchitecture:
    """Layer widths plus skips {target layer: source layer}.

    Layer 0 is the input. A skip adds the source activation to the target's
    pre-activation. By default every hidden encoder layer feeds its
    equal-width mirror in the decoder; the input/output pair is left out,
    since adding the input to the output would make reconstruction trivial.
    """

    widths: tuple[int, ...] = DEFAULT_WIDTHS
    skips: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 3 or any(w < 1 for w in widths):
            raise ValueError("need at least one hidden layer and positive widths")
        if widths[0] != widths[-1]:
            raise ValueError("input and output widths differ")
        inner = widths[1:-1]
        if min(inner) >= widths[0] or sum(w == min(inner) for w in inner) != 1:
            raise ValueError("bottleneck must be the unique narrowest layer")
        if self.skips is None:
            object.__setattr__(self, "skips", self.mirror_skips(widths))
        skips = tuple(sorted((int(t), int(s)) for t, s in self.skips))
        object.__setattr__(self, "skips", skips)
        L = len(widths) - 1
        targets = [t for t, _ in skips]
        if len(set(targets)) != len(targets):
            raise ValueError("a layer can receive at most one skip")
        for t, s in skips:
            if not 0 <= s < t <= L:
                raise ValueError(f"skip {s}->{t} must go forward")
            if widths[s] != widths[t]:
                raise ValueError(f"skip {s}->{t} joins layers of different width")

    @staticmethod
    def mirror_skips(widths) -> tuple[tuple[int, int], ...]:
        L = len(widths) - 1
        return tuple((L - i, i) for i in range(1, L) if i < L - i and widths[i] == widths[L - i])

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "skips": [list(p) for p in self.skips]}

    @classmethod
    def from_dict(cls, d: dict) -> "AeArchitecture":
        return cls(tuple(d["widths"]), tuple(tuple(p) for p in d["skips"]))


def init_params(arch: AeArchitecture, rng: np.random.Generator) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """He-normal weights (fan-in), zero biases."""
    W, b = [], []
    for i in range(arch.n_layers):
        fan_in, fan_out = arch.widths[i], arch.widths[i + 1]
        W.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        b.append(np.zeros(fan_out))
    return W, b


def forward(arch: AeArchitecture, W, b, Z: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Activations a[0..L] and pre-activations z[1..L] (z[0] is unused)."""
    skip_of = dict(arch.skips)
    L = arch.n_layers
    a = [Z]
    z = [None]
    for i in range(1, L + 1):
        pre = a[i - 1] @ W[i - 1] + b[i - 1]
        if i in skip_of:
            pre = pre + a[skip_of[i]]
        z.append(pre)
        a.append(pre if i == L else np.maximum(pre, 0.0))
    return a, z


def loss_and_grads(arch: AeArchitecture, W, b, Z: np.ndarray):
    """Mean squared reconstruction error over all entries, and its gradients."""
    a, z = forward(arch, W, b, Z)
    L = arch.n_layers
    diff = a[L] - Z
    loss = float((diff**2).mean())
    sources: dict[int, list[int]] = {}
    for t, s in arch.skips:
        sources.setdefault(s, []).append(t)
    delta: list[np.ndarray | None] = [None] * (L + 1)
    gW: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * L  # type: ignore[list-item]
    delta[L] = 2.0 * diff / diff.size
    for i in range(L, 0, -1):
        gW[i - 1] = a[i - 1].T @ delta[i]
        gb[i - 1] = delta[i].sum(axis=0)
        if i == 1:
            break
        da = delta[i] @ W[i - 1].T
        for t in sources.get(i - 1, ()):
            da = da + delta[t]
        delta[i - 1] = da * (z[i - 1] > 0)
    return loss, gW, gb


@dataclass(frozen=True)
class AeModel:
    arch: AeArchitecture
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    standardization: Standardizer
    seed: int | None = None
    threshold: float | None = None
    loss_history: tuple[float, ...] = ()
    hyper: dict = field(default_factory=dict)

    def reconstruct(self, Z: np.ndarray) -> np.ndarray:
        a, _ = forward(self.arch, self.weights, self.biases, np.asarray(Z, dtype=float))
        return a[-1]

    def standardized(self, X) -> np.ndarray:
        X = X.X if isinstance(X, Dataset) else X
        return self.standardization.transform(np.asarray(X, dtype=float))

    def squared_errors(self, X) -> np.ndarray:
        Z = self.standardized(X)
        return (self.reconstruct(Z) - Z) ** 2

    def score(self, X) -> np.ndarray:
        return reconstruction_mse(self, X)

    def predict(self, X) -> np.ndarray:
        if self.threshold is None:
            raise ValueError("model has no MSE threshold")
        return (self.score(X) > self.threshold).astype(np.int8)

    def with_threshold(self, threshold: float) -> "AeModel":
        return replace(self, threshold=float(threshold))

    def to_dict(self) -> dict:
        return {
            "version": ARTIFACT_VERSION,
            "architecture": self.arch.to_dict(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [v.tolist() for v in self.biases],
            "standardization": self.standardization.to_dict(),
            "seed": self.seed,
            "threshold": self.threshold,
            "loss_history": list(self.loss_history),
            "hyper": self.hyper,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AeModel":
        if d.get("version") != ARTIFACT_VERSION:
            raise ValueError(f"unsupported autoencoder artifact version {d.get('version')!r}")
        arch = AeArchitecture.from_dict(d["architecture"])
        W = tuple(np.asarray(w, dtype=float).reshape(arch.widths[i], arch.widths[i + 1]) for i, w in enumerate(d["weights"]))
        b = tuple(np.asarray(v, dtype=float) for v in d["biases"])
        return cls(
            arch,
            W,
            b,
            Standardizer.from_dict(d["standardization"]),
            d.get("seed"),
            d.get("threshold"),
            tuple(d.get("loss_history", ())),
            dict(d.get("hyper", {})),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "AeModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            for i, v in enumerate(self.loss_history, start=1):
                w.writerow([i, repr(float(v))])


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / epochs))


def train_autoencoder(
    X,
    arch: AeArchitecture | None = None,
    epochs: int = 100,
    batch: int = 128,
    lr: float = 1e-3,
    seed: int = 0,
    standardization: Standardizer | None = None,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AeModel:
    """Mini-batch Adam on the benign rows of X with a cosine-decayed step size."""
    X = X.X if isinstance(X, Dataset) else np.asarray(X, dtype=float)
    if len(X) < 2:
        raise ValueError("need at least two benign records")
    if epochs < 1 or batch < 1 or not lr > 0:
        raise ValueError("epochs, batch and lr must be positive")
    arch = arch or AeArchitecture()
    if X.shape[1] != arch.widths[0]:
        raise ValueError(f"expected {arch.widths[0]} features, got {X.shape[1]}")
    std = standardization or fit_standardizer(X)
    Z = std.transform(X)
    rng = np.random.default_rng(seed)
    W, b = init_params(arch, rng)
    params = W + b
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2 = betas
    step = 0
    history: list[float] = []
    n = len(Z)
    for epoch in range(epochs):
        rate = cosine_lr(lr, epoch, epochs)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            rows = order[start : start + batch]
            loss, gW, gb = loss_and_grads(arch, W, b, Z[rows])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {step + 1}, learning rate {rate:g}")
            total += loss * len(rows)
            step += 1
            for j, g in enumerate(gW + gb):
                m[j] = b1 * m[j] + (1 - b1) * g
                v[j] = b2 * v[j] + (1 - b2) * g * g
                mhat = m[j] / (1 - b1**step)
                vhat = v[j] / (1 - b2**step)
                params[j] -= rate * mhat / (np.sqrt(vhat) + eps)
        history.append(total / n)
    hyper = {"epochs": epochs, "batch": batch, "lr": lr}
    return AeModel(arch, tuple(W), tuple(b), std, seed, None, tuple(history), hyper)


def reconstruction_mse(model: AeModel, X) -> np.ndarray:
    """Per-record mean over standardized features of the squared reconstruction error."""
    return model.squared_errors(X).mean(axis=1)


def select_threshold(model: AeModel, validation, quantile: float = 0.95) -> float:
    if not 0 < quantile <= 1:
        raise ValueError("quantile must lie in (0, 1]")
    scores = reconstruction_mse(model, validation)
    if len(scores) == 0:
        raise ValueError("validation set is empty")
    return nearest_rank_threshold(scores, quantile)


def per_feature_mse_profile(model: AeModel, X, labels) -> np.ndarray:
    """(n_features, 2): mean squared error per feature among benign / anomalous rows."""
    lab = np.asarray(labels)
    anomalous = lab.any(axis=1) if lab.ndim == 2 else lab.astype(bool)
    if anomalous.all() or not anomalous.any():
        raise ValueError("profile needs both benign and anomalous records")
    err = model.squared_errors(X)
    return np.column_stack([err[~anomalous].mean(axis=0), err[anomalous].mean(axis=0)])


def check_gradients(model: AeModel, Z: np.ndarray, h: float = 1e-6) -> list[float]:
    """Relative error between analytic and central-difference gradients, per parameter array.

    Error of one array is ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||).
    """
    arch = model.arch
    W = [w.copy() for w in model.weights]
    b = [v.copy() for v in model.biases]
    _, gW, gb = loss_and_grads(arch, W, b, Z)
    out = []
    for params, grads in ((W, gW), (b, gb)):
        for p, g in zip(params, grads):
            num = np.zeros_like(p)
            flat, nflat = p.reshape(-1), num.reshape(-1)
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + h
                up = loss_and_grads(arch, W, b, Z)[0]
                flat[j] = keep - h
                down = loss_and_grads(arch, W, b, Z)[0]
                flat[j] = keep
                nflat[j] = (up - down) / (2 * h)
            scale = max(np.linalg.norm(g), np.linalg.norm(num), 1e-300)
            out.append(float(np.linalg.norm(g - num) / scale))
    return out
