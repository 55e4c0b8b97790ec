"""Experiment orchestration: splits, cross-validated grid search, training, evaluation and reports."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import os
import platform
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .autoencoder import per_feature_mse_profile, reconstruction_mse, select_threshold, train_autoencoder
from .config import ConfigError, ExperimentConfig
from .heuristics import builtin_rules, label_dataset
from .metrics import MetricReport, binary_metrics, confusion_matrix, multilabel_metrics
from .resampling import label_imbalance_ratio, resample_dataset
from .semisup import fit_detector, threshold_scores
from .supervised import feature_importance_nfiv, train_classifier, wrap_binary_relevance
from .telemetry import (
    CATEGORIES,
    FEATURES,
    Dataset,
    GeneratorConfig,
    correlation_matrix,
    fit_standardizer,
    generate_synthetic,
    read_dataset,
)


SEMISUP_LABELS = {
    "ocsvm": "OC-SVM",
    "iforest": "Isolation Forest",
    "elliptic": "Elliptic Envelope",
    "lof": "LOF",
    "autoencoder": "Deep Autoencoder",
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except (ConfigError, PipelineError):
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def derive_seed(seed: int, *tags) -> int:
    """Stable 63-bit sub-seed for a named purpose."""
    digest = hashlib.sha256(repr((int(seed),) + tuple(tags)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------------------
# Splitting


def _strata_keys(labels: np.ndarray) -> list[str]:
    if labels.ndim == 1:
        return [str(int(v)) for v in labels]
    return ["".join(str(int(b)) for b in row) for row in labels]


def stratified_kfold(labels, k: int, seed: int = 0) -> list[np.ndarray]:
    """k disjoint folds covering every index, stratified by class.

    1-D labels are classes and every class needs at least k members. For
    (n, L) bit matrices the strata are the exact label combinations; rows
    whose combination occurs fewer than k times are pooled and dealt out at
    random. Members of each stratum are shuffled and dealt round-robin,
    continuing from where the previous stratum stopped so fold sizes stay
    within one of each other.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    labels = np.asarray(labels)
    n = len(labels)
    if n < k:
        raise ValueError(f"cannot split {n} rows into {k} folds")
    keys = _strata_keys(labels)
    groups: dict[str, list[int]] = {}
    for i, key in enumerate(keys):
        groups.setdefault(key, []).append(i)
    rare: list[int] = []
    strata: list[list[int]] = []
    for key in sorted(groups):
        members = groups[key]
        if len(members) < k:
            if labels.ndim == 1:
                raise ValueError(f"class {key} has {len(members)} rows, fewer than k={k}")
            rare.extend(members)
        else:
            strata.append(members)
    if rare:
        strata.append(sorted(rare))
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    offset = 0
    for members in strata:
        perm = rng.permutation(np.asarray(members))
        fold_of[perm] = (offset + np.arange(len(perm))) % k
        offset = (offset + len(perm)) % k
    return [np.flatnonzero(fold_of == f) for f in range(k)]


def holdout_split(labels, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified train/test split: the test set is one fold of a round(1/fraction)-fold split."""
    k = max(2, int(round(1.0 / test_fraction)))
    folds = stratified_kfold(labels, k, seed)
    test = folds[0]
    train = np.sort(np.concatenate(folds[1:]))
    return train, test


# ---------------------------------------------------------------------------
# Supervised fitting with fold-local preprocessing


@dataclass(frozen=True)
class ResampleSpec:
    mode: str = "none"  # none | smote | mlsmote
    k: int = 5
    smote_pct: int = 100
    lir_critical: float = 1.1


def _targets(task: str, data: Dataset) -> np.ndarray:
    if task == "binary":
        return data.is_anomalous.astype(np.int8)
    if task == "multilabel":
        return data.labels
    raise ValueError(f"unknown supervised task {task!r}")


def _resample(data: Dataset, spec: ResampleSpec, seed: int) -> Dataset:
    if spec.mode == "none":
        return data
    mode = "binary" if spec.mode == "smote" else "multilabel"
    out, _ = resample_dataset(data, mode, spec.k, spec.smote_pct, spec.lir_critical, seed)
    return out


def fit_supervised(
    task: str,
    algorithm: str,
    params: dict,
    train: Dataset,
    seed: int,
    resample: ResampleSpec = ResampleSpec(),
    fit_log: list | None = None,
    rows: np.ndarray | None = None,
    tag=None,
):
    """Resample, standardize and fit on ``train`` only.

    ``rows`` names the training rows (indices into the caller's dataset) for
    the optional ``fit_log``, which receives one entry per fitted component.
    """
    aug = _resample(train, resample, derive_seed(seed, "resample"))
    std = fit_standardizer(aug.X)
    if fit_log is not None:
        for what in (["resample"] if resample.mode != "none" else []) + ["standardize", "model"]:
            fit_log.append({"stage": what, "tag": tag, "rows": rows})
    y = _targets(task, aug)
    if task == "binary":
        return train_classifier(algorithm, aug.X, y, seed=seed, standardization=std, **params)
    return wrap_binary_relevance(algorithm, aug.X, y, seed=seed, standardization=std, **params)


def evaluate_supervised(task: str, model, test: Dataset) -> MetricReport:
    truth = _targets(task, test)
    if task == "binary":
        return binary_metrics(model.predict(test.X), truth, model.score(test.X))
    return multilabel_metrics(model.predict(test.X), truth, model.score(test.X))


def iter_grid(grid: dict[str, list]) -> list[dict]:
    """Cartesian product in the order keys and values were given."""
    if not grid:
        return [{}]
    keys = list(grid)
    for k in keys:
        if not grid[k]:
            raise ConfigError(f"grid for {k!r} is empty")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


@dataclass
class GridResult:
    algorithm: str
    metric: str
    best_params: dict
    rows: list[dict] = field(default_factory=list)

    @property
    def best(self) -> dict:
        return next(r for r in self.rows if r["params"] == self.best_params)


def _summarize(reports: list[MetricReport]) -> dict:
    keys = sorted({k for r in reports for k in r.to_dict()})
    mean, std = {}, {}
    for k in keys:
        vals = np.array([r.to_dict()[k] for r in reports if k in r.to_dict()], dtype=float)
        mean[k] = float(vals.mean())
        std[k] = float(vals.std())
    return {"mean": mean, "std": std}


def grid_search(
    task: str,
    algorithm: str,
    grid: dict[str, list],
    data: Dataset,
    folds: int = 5,
    seed: int = 0,
    resample: ResampleSpec = ResampleSpec(),
    fit_log: list | None = None,
    resample_scope: str = "fold",
) -> GridResult:
    """Exhaustive k-fold CV over the grid; f1 (binary) or hamming_score (multi-label) selects.

    Ties keep the earlier grid point. ``resample_scope="global"`` resamples
    the whole dataset before splitting; it leaks synthetic copies of
    validation rows into training and exists only to measure that leak.
    """
    points = iter_grid(grid)
    metric = "f1_score" if task == "binary" else "hamming_score"
    if resample_scope == "global":
        data = _resample(data, resample, derive_seed(seed, "global-resample"))
        resample = ResampleSpec()
    elif resample_scope != "fold":
        raise ValueError("resample_scope must be 'fold' or 'global'")
    split = stratified_kfold(_targets(task, data), folds, derive_seed(seed, "cv"))
    everything = np.arange(len(data))
    result = GridResult(algorithm, metric, points[0])
    best_score = -np.inf
    for gi, params in enumerate(points):
        reports = []
        for fi, val in enumerate(split):
            tr = np.setdiff1d(everything, val)
            with stage(f"cv:{task}:{algorithm}:grid{gi}:fold{fi}"):
                model = fit_supervised(
                    task, algorithm, params, data.subset(tr), derive_seed(seed, "fit", gi, fi),
                    resample, fit_log, tr, (gi, fi),
                )
                reports.append(evaluate_supervised(task, model, data.subset(val)))
        summary = _summarize(reports)
        scores = [r.to_dict()[metric] for r in reports]
        result.rows.append({"params": params, "folds": scores, **summary})
        if summary["mean"][metric] > best_score:
            best_score = summary["mean"][metric]
            result.best_params = params
    return result


# ---------------------------------------------------------------------------
# Experiment


@dataclass
class ReportBundle:
    report: dict
    tables: dict[str, list[list]] = field(default_factory=dict)
    plotdata: dict[str, list[list]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_plain(self.report), sort_keys=True, indent=2) + "\n"

    def write(self, out_dir: str) -> None:
        """Write atomically: build in a sibling temp dir, then swap it in."""
        out_dir = os.path.abspath(out_dir)
        parent = os.path.dirname(out_dir)
        os.makedirs(parent, exist_ok=True)
        tmp = tempfile.mkdtemp(prefix=".streamshield-", dir=parent)
        try:
            with open(os.path.join(tmp, "report.json"), "w") as fh:
                fh.write(self.to_json())
            for sub, files in (("tables", self.tables), ("plotdata", self.plotdata)):
                os.makedirs(os.path.join(tmp, sub))
                for name, rows in files.items():
                    _write_csv(os.path.join(tmp, sub, name + ".csv"), rows)
            if os.path.isdir(out_dir):
                shutil.rmtree(out_dir)
            os.replace(tmp, out_dir)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def _write_csv(path: str, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow([_cell(v) for v in row])


def load_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.data_source == "generate":
        ds = generate_synthetic(GeneratorConfig(n_benign=cfg.n_benign, n_anomalous=cfg.n_anomalous, seed=cfg.seed))
    else:
        ds = read_dataset(cfg.data_source)
    if cfg.labels == "heuristics":
        ds, _ = label_dataset(ds, builtin_rules())
    if ds.labels is None:
        raise ValueError("dataset has no labels; use data.labels = heuristics")
    return ds


_METRIC_COLUMNS = ("accuracy", "precision", "recall", "f05_score", "f1_score", "f2_score", "roc_auc")
_ML_COLUMNS = ("emr", "hamming_loss", "hamming_score", "precision", "recall", "f05_score", "f1_score", "f2_score", "roc_auc")


def run_semisup(cfg: ExperimentConfig, data: Dataset, train: np.ndarray, test: np.ndarray, bundle: ReportBundle) -> dict:
    """Benign-only fit, benign-holdout threshold, mixed test evaluation."""
    anomalous = data.is_anomalous
    benign_train = train[~anomalous[train]]
    rng = np.random.default_rng(derive_seed(cfg.seed, "semisup-calibration"))
    perm = rng.permutation(benign_train)
    n_cal = max(1, int(round(cfg.test_fraction * len(perm))))
    calib, fit_rows = np.sort(perm[:n_cal]), np.sort(perm[n_cal:])
    X_fit, X_cal, X_test = data.X[fit_rows], data.X[calib], data.X[test]
    truth = anomalous[test].astype(np.int8)
    out: dict = {"protocol": {"fit_rows": len(fit_rows), "calibration_rows": len(calib), "test_rows": len(test)}, "models": {}}
    table = [["model", *(_METRIC_COLUMNS)]]
    for name in cfg.semisup_models:
        params = dict(cfg.semisup_params.get(name, {}))
        seed = derive_seed(cfg.seed, "semisup", name)
        with stage(f"semisup:{name}"):
            if name == "autoencoder":
                quantile = params.pop("quantile", 1.0 - cfg.contamination)
                model = train_autoencoder(X_fit, seed=seed, **params)
                model = model.with_threshold(select_threshold(model, X_cal, quantile))
                scores = reconstruction_mse(model, X_test)
                _autoencoder_plots(model, data, test, scores, truth, bundle)
            else:
                if name == "elliptic":
                    params.setdefault("contamination", cfg.contamination)
                model = fit_detector(name, X_fit, seed=seed, **params)
                _, thr = threshold_scores(model, model.score(X_cal), cfg.contamination)
                model = model.with_threshold(thr)
                scores = model.score(X_test)
            pred = (scores > model.threshold).astype(np.int8)
            rep = binary_metrics(pred, truth, scores)
        out["models"][name] = {
            "display_name": SEMISUP_LABELS[name],
            "threshold": model.threshold,
            "test": rep.to_dict(),
            "confusion": confusion_matrix(pred, truth).to_dict(),
        }
        table.append([SEMISUP_LABELS[name], *(rep.to_dict().get(c) for c in _METRIC_COLUMNS)])
    bundle.tables["semisup"] = table
    return out


def _autoencoder_plots(model, data: Dataset, test: np.ndarray, scores: np.ndarray, truth: np.ndarray, bundle: ReportBundle) -> None:
    edges = np.linspace(float(scores.min()), float(scores.max()), 51)
    hb, _ = np.histogram(scores[truth == 0], edges)
    ha, _ = np.histogram(scores[truth == 1], edges)
    bundle.plotdata["mse_histogram"] = [["bin_left", "bin_right", "benign", "anomalous"]] + [
        [edges[i], edges[i + 1], int(hb[i]), int(ha[i])] for i in range(len(hb))
    ]
    bundle.plotdata["mse_threshold"] = [["threshold"], [model.threshold]]
    if truth.any() and not truth.all():
        prof = per_feature_mse_profile(model, data.X[test], truth)
        bundle.plotdata["mse_per_feature"] = [["feature", "benign_mse", "anomalous_mse"]] + [
            [f, prof[i, 0], prof[i, 1]] for i, f in enumerate(FEATURES)
        ]
    bundle.plotdata["ae_loss"] = [["epoch", "loss"]] + [[i + 1, v] for i, v in enumerate(model.loss_history)]


def _supervised_block(
    cfg: ExperimentConfig, task: str, name: str, data: Dataset, train: np.ndarray, test: np.ndarray,
    resample: ResampleSpec, variant: str, bundle: ReportBundle,
) -> dict:
    seed = derive_seed(cfg.seed, task, name, variant)
    with stage(f"grid:{task}:{name}:{variant}"):
        gs = grid_search(task, name, cfg.grid(name), data.subset(train), cfg.folds, seed, resample)
    with stage(f"train:{task}:{name}:{variant}"):
        model = fit_supervised(task, name, gs.best_params, data.subset(train), derive_seed(seed, "final"), resample)
    with stage(f"evaluate:{task}:{name}:{variant}"):
        rep = evaluate_supervised(task, model, data.subset(test))
    keys = list(cfg.grid(name))
    cv_rows = [["grid_index", *keys, f"mean_{gs.metric}", f"std_{gs.metric}", *(f"fold{i}" for i in range(cfg.folds))]]
    for gi, row in enumerate(gs.rows):
        cv_rows.append([gi, *(row["params"][k] for k in keys), row["mean"][gs.metric], row["std"][gs.metric], *row["folds"]])
    bundle.tables[f"cv_{task}_{name}_{variant}"] = cv_rows
    block = {"best_params": gs.best_params, "selection_metric": gs.metric, "cv": gs.best, "test": rep.to_dict()}
    if task == "binary":
        block["confusion"] = confusion_matrix(model.predict(data.X[test]), data.is_anomalous[test]).to_dict()
    return block


def run_binary(cfg: ExperimentConfig, data: Dataset, train: np.ndarray, test: np.ndarray, bundle: ReportBundle) -> dict:
    spec = ResampleSpec(cfg.binary_resample, cfg.resample_k, cfg.smote_pct, cfg.lir_critical)
    out = {"resample": cfg.binary_resample, "models": {}}
    table = [["model", *_METRIC_COLUMNS]]
    for name in cfg.binary_models:
        block = _supervised_block(cfg, "binary", name, data, train, test, spec, "main", bundle)
        out["models"][name] = block
        table.append([name, *(block["test"].get(c) for c in _METRIC_COLUMNS)])
    bundle.tables["binary"] = table
    return out


def run_multilabel(cfg: ExperimentConfig, data: Dataset, bundle: ReportBundle) -> dict:
    """Fraud-category classification on the anomalous records."""
    anomalous = data.subset(data.is_anomalous)
    train, test = holdout_split(anomalous.labels, cfg.test_fraction, derive_seed(cfg.seed, "multilabel-split"))
    spec = ResampleSpec(cfg.multilabel_resample, cfg.resample_k, cfg.smote_pct, cfg.lir_critical)
    variants = [("upsampled" if spec.mode != "none" else "original", spec)]
    if spec.mode != "none" and cfg.compare_original:
        variants.append(("original", ResampleSpec()))
    out: dict = {"resample": cfg.multilabel_resample, "rows": {"train": len(train), "test": len(test)}, "models": {}}
    with stage("multilabel:lir"):
        before = label_imbalance_ratio(anomalous.labels[train])
        lir = {"before": before.to_dict()}
        if spec.mode != "none":
            aug = _resample(anomalous.subset(train), spec, derive_seed(cfg.seed, "lir-table"))
            lir["after"] = label_imbalance_ratio(aug.labels).to_dict()
    out["lir"] = lir
    lir_rows = [["label", "count_before", "lir_before", "count_after", "lir_after"]]
    for c in CATEGORIES:
        after = lir.get("after", {}).get(c, {})
        lir_rows.append([c, lir["before"][c]["count"], lir["before"][c]["lir"], after.get("count"), after.get("lir")])
    bundle.tables["lir"] = lir_rows
    bundle.plotdata["lir"] = [["stage", "label", "lir"]] + [
        [st, c, lir[st][c]["lir"]] for st in ("before", "after") if st in lir for c in CATEGORIES
    ]
    table = [["model", "variant", *_ML_COLUMNS]]
    for name in cfg.multilabel_models:
        out["models"][name] = {}
        for variant, vspec in variants:
            block = _supervised_block(cfg, "multilabel", name, anomalous, train, test, vspec, variant, bundle)
            out["models"][name][variant] = block
            table.append([name, variant, *(block["test"].get(c) for c in _ML_COLUMNS)])
    bundle.tables["multilabel"] = table
    return out


def run_nfiv(cfg: ExperimentConfig, data: Dataset, train: np.ndarray, bundle: ReportBundle) -> dict:
    """Per-category tree importance from one-vs-rest detectors."""
    rows = train if cfg.nfiv_scope == "full" else train[data.is_anomalous[train]]
    params = iter_grid(cfg.grid(cfg.nfiv_model))[0]
    with stage("nfiv"):
        sub = data.subset(rows)
        model = wrap_binary_relevance(cfg.nfiv_model, sub.X, sub.labels, seed=derive_seed(cfg.seed, "nfiv"), **params)
        nfiv = feature_importance_nfiv(model)
    out = {"model": cfg.nfiv_model, "scope": cfg.nfiv_scope, "params": params, "values": {}, "top3": {}}
    for c, row in zip(CATEGORIES, nfiv):
        out["values"][c] = {f: float(v) for f, v in zip(FEATURES, row)}
        order = sorted(range(len(FEATURES)), key=lambda i: (-row[i], i))
        out["top3"][c] = [FEATURES[i] for i in order[:3]]
        bundle.plotdata[f"nfiv_{c}"] = [["feature", "nfiv"]] + [[FEATURES[i], row[i]] for i in order]
    bundle.tables["nfiv"] = [["feature", *CATEGORIES]] + [[f, *nfiv[:, i]] for i, f in enumerate(FEATURES)]
    return out


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ReportBundle:
    cfg.validate()
    bundle = ReportBundle({})
    with stage("load"):
        data = load_data(cfg)
    anomalous = data.is_anomalous
    with stage("split"):
        train, test = holdout_split(anomalous.astype(np.int8), cfg.test_fraction, derive_seed(cfg.seed, "split"))
    report: dict = {
        "provenance": {
            "config_sha256": cfg.digest(),
            "config": cfg.canonical(),
            "seed": cfg.seed,
            "versions": {"streamshield": __version__, "numpy": np.__version__, "python": platform.python_version()},
        },
        "dataset": {
            "records": len(data),
            "benign": int((~anomalous).sum()),
            "anomalous": int(anomalous.sum()),
            "label_counts": {c: int(v) for c, v in zip(CATEGORIES, data.labels.sum(axis=0))},
            "train_rows": len(train),
            "test_rows": len(test),
        },
    }
    for cls in ("benign", "anomalous"):
        if (anomalous if cls == "anomalous" else ~anomalous).sum() >= 2:
            C = correlation_matrix(data, cls)
            bundle.plotdata[f"correlation_{cls}"] = [["feature", *FEATURES]] + [[f, *C[i]] for i, f in enumerate(FEATURES)]
    if "semisup" in cfg.tasks:
        report["semisup"] = run_semisup(cfg, data, train, test, bundle)
    if "binary" in cfg.tasks:
        report["binary"] = run_binary(cfg, data, train, test, bundle)
    if "multilabel" in cfg.tasks:
        report["multilabel"] = run_multilabel(cfg, data, bundle)
        report["nfiv"] = run_nfiv(cfg, data, train, bundle)
    bundle.report = report
    if write:
        with stage("write"):
            bundle.write(cfg.out)
    return bundle
