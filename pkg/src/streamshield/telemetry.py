"""Account-day feature schema, synthetic telemetry, CSV I/O and standardization."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import permutations
from typing import IO, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

FEATURES: tuple[str, ...] = (
    "dev_type_a_pct",
    "dev_type_b_pct",
    "dev_type_c_pct",
    "dist_cdm_cnt",
    "dist_cdm_ver_cnt",
    "dist_ip_cnt",
    "dist_drm_cnt",
    "dist_enc_frmt_cnt",
    "dist_dev_id_cnt",
    "dist_dev_cat_cnt",
    "dist_hour_cnt",
    "dist_profile_cnt",
    "dist_title_cnt",
    "drm_type_a_pct",
    "drm_type_b_pct",
    "drm_type_c_pct",
    "drm_type_d_pct",
    "end_frmt_a_pct",
    "end_frmt_b_pct",
    "end_frmt_c_pct",
    "end_frmt_d_pct",
    "expect_msg_pct",
    "license_cnt",
)
N_FEATURES = len(FEATURES)
FEATURE_INDEX = {name: i for i, name in enumerate(FEATURES)}

PCT_IDX = np.array([i for i, f in enumerate(FEATURES) if f.endswith("_pct")])
CNT_IDX = np.array([i for i, f in enumerate(FEATURES) if f.endswith("_cnt")])
PCT_GROUPS: tuple[tuple[int, ...], ...] = (
    (0, 1, 2),
    (13, 14, 15, 16),
    (17, 18, 19, 20),
)
TITLE_IDX = FEATURE_INDEX["dist_title_cnt"]
LICENSE_IDX = FEATURE_INDEX["license_cnt"]

CATEGORIES: tuple[str, ...] = ("content", "service", "account")

GROUP_SUM_TOL = 1e-9
PCT_QUANTUM = 1e-6


class LabelVector(NamedTuple):
    """Three fraud-category bits; all zero means benign."""

    content: int = 0
    service: int = 0
    account: int = 0

    @classmethod
    def parse(cls, cell: str) -> "LabelVector":
        cell = cell.strip()
        if not cell:
            return cls()
        names = [c.strip() for c in cell.split(";")]
        unknown = set(names) - set(CATEGORIES)
        if unknown:
            raise ValueError(f"unknown label(s): {sorted(unknown)}")
        return cls(*(int(c in names) for c in CATEGORIES))

    def format(self) -> str:
        return ";".join(c for c, bit in zip(CATEGORIES, self) if bit)

    @property
    def is_anomalous(self) -> bool:
        return any(self)


@dataclass(frozen=True)
class AccountDayRecord:
    """One account's daily streaming signature.

    Feature values are reachable by name, e.g. ``record.license_cnt``.
    """

    account_id: str
    day_index: int
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} feature values, got {len(self.values)}")

    def __getattr__(self, name: str) -> float:
        idx = FEATURE_INDEX.get(name)
        if idx is None:
            raise AttributeError(name)
        return self.values[idx]

    @classmethod
    def from_features(cls, account_id: str = "acct", day_index: int = 0, **features: float) -> "AccountDayRecord":
        """Build a record from keyword features; unspecified features are zero."""
        unknown = set(features) - set(FEATURES)
        if unknown:
            raise ValueError(f"unknown feature(s): {sorted(unknown)}")
        return cls(account_id, day_index, tuple(float(features.get(f, 0.0)) for f in FEATURES))


def validate_record(record: AccountDayRecord) -> list[str]:
    """Return the names of violated invariants; an empty list means the record is valid."""
    return _violations(np.asarray(record.values, dtype=float)[None, :])[0]


def _violations(X: np.ndarray) -> list[list[str]]:
    pct = X[:, PCT_IDX]
    cnt = X[:, CNT_IDX]
    checks = [
        ("non-finite value", ~np.isfinite(X).all(axis=1)),
        ("pct out of range", ((pct < 0) | (pct > 1)).any(axis=1)),
        ("count negative", (cnt < 0).any(axis=1)),
        ("count not integral", (cnt != np.round(cnt)).any(axis=1)),
        (
            "group sum exceeds 1",
            np.any([X[:, list(g)].sum(axis=1) > 1 + GROUP_SUM_TOL for g in PCT_GROUPS], axis=0),
        ),
        ("titles exceed licenses", X[:, TITLE_IDX] > X[:, LICENSE_IDX]),
    ]
    out: list[list[str]] = [[] for _ in range(len(X))]
    for name, mask in checks:
        for i in np.flatnonzero(mask):
            out[i].append(name)
    return out


def validate_matrix(X: np.ndarray) -> dict[int, list[str]]:
    """Vectorised validation; maps row index to violations for invalid rows only."""
    return {i: v for i, v in enumerate(_violations(np.asarray(X, dtype=float))) if v}


# ---------------------------------------------------------------------------
# Dataset and standardization


@dataclass(frozen=True)
class Standardizer:
    """Per-feature affine map to zero mean and unit (population) deviation."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if self.mean.ndim != 1 or self.mean.shape != self.scale.shape:
            raise ValueError("standardization needs matching 1-D mean and deviation vectors")
        if not np.all(self.scale > 0):
            raise ValueError("deviations must be strictly positive")

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=float) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float))


def fit_standardizer(data: "Dataset | np.ndarray") -> Standardizer:
    X = data.X if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    if len(X) == 0:
        raise ValueError("cannot fit a standardizer on an empty dataset")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    # constant columns keep deviation 1 so they map to 0
    scale = np.where(scale > 0, scale, 1.0)
    return Standardizer(mean, scale)


def apply_standardizer(dataset: "Dataset", standardizer: Standardizer) -> "Dataset":
    return Dataset(
        dataset.account_ids,
        dataset.day_index,
        standardizer.transform(dataset.X),
        dataset.labels,
        standardization=standardizer,
    )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered account-day records with optional (n, 3) label bits."""

    account_ids: tuple[str, ...]
    day_index: np.ndarray
    X: np.ndarray
    labels: np.ndarray | None = None
    standardization: Standardizer | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float).reshape(-1, N_FEATURES)
        n = len(X)
        ids = tuple(str(a) for a in self.account_ids)
        if len(ids) != n:
            raise ValueError("account_ids and X differ in length")
        day = np.asarray(self.day_index, dtype=np.int64).reshape(-1)
        if len(day) != n:
            raise ValueError("day_index and X differ in length")
        object.__setattr__(self, "account_ids", ids)
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "day_index", _frozen(day))
        if self.labels is not None:
            Y = np.asarray(self.labels, dtype=np.int8).reshape(-1, len(CATEGORIES))
            if len(Y) != n:
                raise ValueError("labels and records differ in length")
            if not np.isin(Y, (0, 1)).all():
                raise ValueError("labels must be bits")
            object.__setattr__(self, "labels", _frozen(Y))
        if self.standardization is not None and len(self.standardization.mean) != N_FEATURES:
            raise ValueError("standardization must hold exactly 23 (mean, deviation) pairs")

    def __len__(self) -> int:
        return len(self.X)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.account_ids == other.account_ids
            and np.array_equal(self.day_index, other.day_index)
            and np.array_equal(self.X, other.X)
            and (self.labels is None or np.array_equal(self.labels, other.labels))
        )

    def record(self, i: int) -> AccountDayRecord:
        return AccountDayRecord(self.account_ids[i], int(self.day_index[i]), tuple(float(v) for v in self.X[i]))

    def records(self) -> Iterator[AccountDayRecord]:
        return (self.record(i) for i in range(len(self)))

    def label_vectors(self) -> list[LabelVector]:
        if self.labels is None:
            raise ValueError("dataset is unlabeled")
        return [LabelVector(*map(int, row)) for row in self.labels]

    @property
    def is_anomalous(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("dataset is unlabeled")
        return self.labels.any(axis=1)

    def subset(self, idx: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return Dataset(
            tuple(self.account_ids[i] for i in idx),
            self.day_index[idx],
            self.X[idx],
            None if self.labels is None else self.labels[idx],
            self.standardization,
        )

    def with_labels(self, labels: np.ndarray | Iterable[LabelVector] | None) -> "Dataset":
        if labels is not None and not isinstance(labels, np.ndarray):
            labels = np.array([tuple(v) for v in labels], dtype=np.int8).reshape(-1, len(CATEGORIES))
        return Dataset(self.account_ids, self.day_index, self.X, labels, self.standardization)

    @classmethod
    def from_records(cls, records: Sequence[AccountDayRecord], labels: Iterable[LabelVector] | None = None) -> "Dataset":
        ds = cls(
            tuple(r.account_id for r in records),
            np.array([r.day_index for r in records], dtype=np.int64),
            np.array([r.values for r in records], dtype=float).reshape(-1, N_FEATURES),
        )
        return ds.with_labels(labels) if labels is not None else ds

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        labeled = [p.labels is not None for p in parts]
        if any(labeled) and not all(labeled):
            raise ValueError("cannot concatenate labeled and unlabeled datasets")
        return cls(
            tuple(a for p in parts for a in p.account_ids),
            np.concatenate([p.day_index for p in parts]) if parts else np.zeros(0, np.int64),
            np.concatenate([p.X for p in parts]) if parts else np.zeros((0, N_FEATURES)),
            np.concatenate([p.labels for p in parts]) if parts and all(labeled) else None,
        )


# ---------------------------------------------------------------------------
# CSV


class DatasetFormatError(ValueError):
    pass


HEADER: tuple[str, ...] = ("account_id", "day_index", *FEATURES, "labels")


def _fmt(v: float, integral: bool) -> str:
    if integral:
        return str(int(v))
    short = format(float(v), ".9g")
    # fall back to the shortest exact form when 9 digits would lose the value
    return short if float(short) == v else repr(float(v))


def write_dataset(dataset: Dataset, sink: str | IO[str], extra: dict[str, Sequence] | None = None) -> None:
    """Write ``dataset`` as CSV. ``extra`` appends columns after ``labels``."""
    extra = extra or {}
    if isinstance(sink, str):
        with open(sink, "w", newline="", encoding="utf-8") as fh:
            write_dataset(dataset, fh, extra)
        return
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow([*HEADER, *extra])
    cnt = np.zeros(N_FEATURES, dtype=bool)
    cnt[CNT_IDX] = True
    for i in range(len(dataset)):
        row = [dataset.account_ids[i], str(int(dataset.day_index[i]))]
        row += [_fmt(v, cnt[j] and float(v).is_integer()) for j, v in enumerate(dataset.X[i])]
        row.append("" if dataset.labels is None else LabelVector(*map(int, dataset.labels[i])).format())
        row += [str(col[i]) for col in extra.values()]
        writer.writerow(row)


def read_dataset(source: str | IO[str], extra: Sequence[str] = ()) -> Dataset:
    """Parse the dataset CSV. Columns named in ``extra`` are tolerated after ``labels``.

    The labels column is always materialized; benign rows get all-zero bits.
    """
    if isinstance(source, str):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_dataset(fh, extra)
    ds, _ = read_dataset_with_extra(source, extra)
    return ds


def read_dataset_with_extra(source: IO[str], extra: Sequence[str] = ()) -> tuple[Dataset, dict[str, list[str]]]:
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetFormatError("empty file: missing header") from None
    expected = [*HEADER, *extra]
    if header[: len(HEADER)] != list(HEADER) or any(c not in header for c in extra):
        missing = [c for c in expected if c not in header]
        if missing:
            raise DatasetFormatError(f"malformed header: missing column {missing[0]!r}")
        raise DatasetFormatError("malformed header: columns out of order")
    width = len(header)
    ids, days, rows, labels = [], [], [], []
    extras: dict[str, list[str]] = {c: [] for c in extra}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise DatasetFormatError(f"line {lineno}: expected {width} columns, got {len(row)}")
        ids.append(row[0])
        try:
            days.append(int(row[1]))
            values = [float(c) for c in row[2 : 2 + N_FEATURES]]
        except ValueError as exc:
            raise DatasetFormatError(f"line {lineno}: non-numeric cell ({exc})") from None
        pct = np.asarray(values)[PCT_IDX]
        if ((pct < 0) | (pct > 1)).any():
            raise DatasetFormatError(f"line {lineno}: pct out of [0,1]")
        rows.append(values)
        try:
            labels.append(tuple(LabelVector.parse(row[2 + N_FEATURES])))
        except ValueError as exc:
            raise DatasetFormatError(f"line {lineno}: {exc}") from None
        for c in extra:
            extras[c].append(row[header.index(c)])
    ds = Dataset(
        tuple(ids),
        np.array(days, dtype=np.int64),
        np.array(rows, dtype=float).reshape(-1, N_FEATURES),
        np.array(labels, dtype=np.int8).reshape(-1, len(CATEGORIES)),
    )
    return ds, extras


def dataset_to_csv_string(dataset: Dataset) -> str:
    buf = io.StringIO()
    write_dataset(dataset, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Correlation


def correlation_matrix(data: Dataset | np.ndarray, class_filter: str = "all") -> np.ndarray:
    """Pearson correlation of the 23 features, optionally restricted to one class.

    Zero-variance features get 0 off the diagonal; the diagonal is always 1.
    """
    if isinstance(data, Dataset):
        if class_filter == "all":
            X = data.X
        elif class_filter in ("benign", "anomalous"):
            mask = data.is_anomalous
            X = data.X[mask if class_filter == "anomalous" else ~mask]
        else:
            raise ValueError(f"unknown class filter {class_filter!r}")
    else:
        X = np.asarray(data, dtype=float)
    if len(X) < 2:
        raise ValueError("correlation needs at least 2 records")
    Z = X - X.mean(axis=0)
    norm = np.sqrt((Z**2).sum(axis=0))
    live = norm > 0
    Z[:, live] /= norm[live]
    Z[:, ~live] = 0.0
    C = Z.T @ Z
    C = np.triu(C, 1)
    C = C + C.T
    np.clip(C, -1.0, 1.0, out=C)
    np.fill_diagonal(C, 1.0)
    return C


# ---------------------------------------------------------------------------
# Synthetic generator

DEFAULT_ARCHETYPES: dict[str, dict[str, float]] = {
    "content": {"dist_enc_frmt_cnt": 2.5, "dist_drm_cnt": 2.5, "dist_dev_id_cnt": 2.5},
    "service": {"license_cnt": 2.5, "dev_type_a_pct": 2.5, "dist_dev_id_cnt": 2.5},
    # a single dominant feature gets a larger shift so the category stays detectable
    "account": {"dist_dev_id_cnt": 4.0},
}


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters for :func:`generate_synthetic`.

    ``category_mix`` is the target share of each category among all assigned
    labels; ``multi_category_mix`` the share of anomalous records carrying
    1, 2 or 3 categories. Archetype shifts are in units of the benign
    deviation of each feature.
    """

    n_benign: int = 20_000
    n_anomalous: int = 2_000
    category_mix: tuple[float, float, float] = (0.31, 0.47, 0.21)
    multi_category_mix: tuple[float, float, float] = (0.85, 0.12, 0.03)
    seed: int = 42
    archetypes: dict[str, dict[str, float]] = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_ARCHETYPES.items()})

    def validate(self) -> None:
        if self.n_benign < 0 or self.n_anomalous < 0:
            raise ValueError("counts must be non-negative")
        for name in ("category_mix", "multi_category_mix"):
            w = np.asarray(getattr(self, name), dtype=float)
            if w.shape != (3,) or (w < 0).any() or w.sum() <= 0:
                raise ValueError(f"{name} must be three non-negative weights with positive sum")
            # weight groups are renormalized; reject only grossly off totals
            if abs(w.sum() - 1.0) > 0.02:
                raise ValueError(f"{name} must sum to 1 (got {w.sum():.4f})")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        for cat, shifts in self.archetypes.items():
            if cat not in CATEGORIES:
                raise ValueError(f"unknown archetype category {cat!r}")
            for f in shifts:
                if f not in FEATURE_INDEX:
                    raise ValueError(f"unknown archetype feature {f!r}")


def _floor_pct(P: np.ndarray) -> np.ndarray:
    # dividing by the integer step keeps quantised values exactly printable
    steps = round(1 / PCT_QUANTUM)
    return np.floor(P * steps) / steps


def _benign_matrix(rng: np.random.Generator, n: int) -> np.ndarray:
    X = np.zeros((n, N_FEATURES))
    if n == 0:
        return X
    device = rng.gamma(6.0, 1 / 6.0, n)
    title = rng.gamma(5.0, 1 / 5.0, n)
    dev = rng.dirichlet((4.0, 3.0, 2.0, 1.0), n)[:, :3]
    # each device type is normally matched with its own DRM type
    drm = 0.5 * np.column_stack([dev, np.zeros(n)]) + 0.5 * rng.dirichlet(np.ones(5), n)[:, :4]
    enc = rng.dirichlet((5.0, 3.0, 2.0, 1.0, 1.0), n)[:, :4]
    X[:, 0:3] = dev
    X[:, 13:17] = drm
    X[:, 17:21] = enc
    X[:, 21] = rng.beta(18.0, 2.0, n)
    # shared gamma activity factors give correlated, over-dispersed counts
    dev_id = 1 + rng.poisson(1.5 * device)
    X[:, FEATURE_INDEX["dist_dev_id_cnt"]] = dev_id
    X[:, FEATURE_INDEX["dist_cdm_cnt"]] = 1 + rng.poisson(1.0 * device)
    X[:, FEATURE_INDEX["dist_dev_cat_cnt"]] = 1 + rng.binomial(dev_id - 1, 0.3)
    X[:, FEATURE_INDEX["dist_cdm_ver_cnt"]] = 1 + rng.poisson(0.3 * device)
    X[:, FEATURE_INDEX["dist_ip_cnt"]] = 1 + rng.poisson(1.0 * device)
    X[:, FEATURE_INDEX["dist_drm_cnt"]] = 1 + rng.poisson(0.3 * device)
    X[:, FEATURE_INDEX["dist_enc_frmt_cnt"]] = 1 + rng.poisson(0.8 * device)
    for name, mu in (("dist_hour_cnt", 2.5), ("dist_profile_cnt", 0.8), ("dist_title_cnt", 2.0)):
        X[:, FEATURE_INDEX[name]] = 1 + rng.poisson(mu * title)
    X[:, LICENSE_IDX] = np.maximum(X[:, TITLE_IDX], 1 + rng.poisson(4.5 * title))
    X[:, PCT_IDX] = _floor_pct(X[:, PCT_IDX])
    return X


@lru_cache(maxsize=1)
def benign_reference_scale() -> np.ndarray:
    """Per-feature benign deviation, from a fixed reference draw."""
    X = _benign_matrix(np.random.default_rng(20240601), 50_000)
    return X.std(axis=0)


def sanitize(X: np.ndarray) -> np.ndarray:
    """Project rows onto the schema: integral non-negative counts, pct in [0,1],
    group sums at most 1 and titles no more than licenses."""
    X = np.array(X, dtype=float, copy=True)
    X[:, CNT_IDX] = np.maximum(np.rint(X[:, CNT_IDX]), 0.0)
    X[:, PCT_IDX] = np.clip(X[:, PCT_IDX], 0.0, 1.0)
    for g in PCT_GROUPS:
        cols = list(g)
        s = X[:, cols].sum(axis=1)
        over = s > 1.0
        X[np.ix_(over, cols)] /= s[over, None]
    X[:, PCT_IDX] = _floor_pct(X[:, PCT_IDX])
    X[:, LICENSE_IDX] = np.maximum(X[:, LICENSE_IDX], X[:, TITLE_IDX])
    return X


def _label_share(weights: np.ndarray, multiplicity: np.ndarray) -> np.ndarray:
    """Expected share of each category among assigned labels when m categories
    are drawn without replacement proportionally to ``weights``."""
    L = len(weights)
    counts = np.zeros(L)
    for m, pm in enumerate(multiplicity, start=1):
        for order in permutations(range(L), m):
            p, left = 1.0, 1.0
            for c in order:
                p *= weights[c] / left if left > 0 else 0.0
                left -= weights[c]
            for c in order:
                counts[c] += pm * p
    return counts / counts.sum()


def _calibrated_weights(target: np.ndarray, multiplicity: np.ndarray) -> np.ndarray:
    """Draw weights whose label shares after multi-label expansion hit ``target``."""
    w = target.copy()
    for _ in range(500):
        share = _label_share(w, multiplicity)
        ratio = np.divide(target, share, out=np.ones_like(target), where=share > 0)
        w_new = w * ratio
        w_new /= w_new.sum()
        if np.max(np.abs(w_new - w)) < 1e-12:
            return w_new
        w = w_new
    return w


def generate_synthetic(config: GeneratorConfig | None = None) -> Dataset:
    """Generate a labeled benign/anomalous account-day dataset.

    Anomalous records are benign draws whose archetype features are shifted
    upward once per assigned fraud category. The same config always yields the
    same dataset.
    """
    config = config or GeneratorConfig()
    config.validate()
    rng = np.random.default_rng(config.seed)
    nb, na = config.n_benign, config.n_anomalous
    n = nb + na

    X = _benign_matrix(rng, n)
    Y = np.zeros((n, len(CATEGORIES)), dtype=np.int8)

    mix = np.asarray(config.multi_category_mix, dtype=float)
    mix = mix / mix.sum()
    target = np.asarray(config.category_mix, dtype=float)
    target = target / target.sum()
    weights = _calibrated_weights(target, mix)

    scale = benign_reference_scale()
    shift = np.zeros((len(CATEGORIES), N_FEATURES))
    for c, cat in enumerate(CATEGORIES):
        for f, s in config.archetypes.get(cat, {}).items():
            shift[c, FEATURE_INDEX[f]] = s * scale[FEATURE_INDEX[f]]
    # count shifts round up so small-deviation counts still move by at least the nominal amount
    shift[:, CNT_IDX] = np.ceil(shift[:, CNT_IDX] - 1e-9)

    multiplicity = rng.choice(3, size=na, p=mix) + 1
    for j in range(na):
        w = weights.copy()
        for _ in range(multiplicity[j]):
            c = rng.choice(3, p=w / w.sum())
            Y[nb + j, c] = 1
            w[c] = 0.0
    if na:
        X[nb:] += Y[nb:].astype(float) @ shift
        X[nb:] = sanitize(X[nb:])

    order = rng.permutation(n)
    X, Y = X[order], Y[order]
    day = rng.integers(0, 30, n)
    ids = tuple(f"acct{i:07d}" for i in range(n))
    return Dataset(ids, day, X, Y)
