"""Flat ``key = value`` experiment configuration with dotted section prefixes.

Example::

    seed = 42
    data.n_benign = 20000
    experiment.tasks = semisup, binary, multilabel
    binary.models = gradient_boosting, random_forest
    grid.gradient_boosting.learning_rate = 0.1, 0.3
    semisup.iforest.n_trees = 100

Lines starting with ``#`` are comments. Comma-separated values are lists.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field


class ConfigError(ValueError):
    """Invalid configuration value or hyperparameter."""


TASKS = ("semisup", "binary", "multilabel")
SEMISUP_MODELS = ("ocsvm", "iforest", "elliptic", "lof", "autoencoder")
SUPERVISED_MODELS = ("cart", "random_forest", "gradient_boosting", "knn", "nearest_centroid", "gaussian_nb", "qda")

# hyperparameters each algorithm accepts, with their value types
_SEMISUP_PARAMS = {
    "ocsvm": {"nu": float, "rff_dim": int, "epochs": int},
    "iforest": {"n_trees": int, "subsample": int},
    "elliptic": {"c_steps": int, "support_fraction": float},
    "lof": {"k": int},
    "autoencoder": {"epochs": int, "batch": int, "lr": float, "quantile": float},
}
_SUPERVISED_PARAMS = {
    "cart": {"max_depth": int, "min_leaf": int},
    "random_forest": {"n_trees": int, "max_depth": int, "features_per_split": int, "min_leaf": int},
    "gradient_boosting": {"rounds": int, "learning_rate": float, "max_depth": int, "min_leaf": int},
    "knn": {"k": int},
    "nearest_centroid": {},
    "gaussian_nb": {},
    "qda": {},
}

# searched when the config names no grid for a hyperparameter
DEFAULT_GRIDS = {
    "cart": {"max_depth": [3, 5, 8]},
    "random_forest": {"n_trees": [50, 100], "max_depth": [3, 5, 8]},
    "gradient_boosting": {"rounds": [50, 100], "learning_rate": [0.05, 0.1, 0.3], "max_depth": [3, 5, 8]},
    "knn": {"k": [5, 15, 31]},
}


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _convert(key: str, value: str, kind):
    try:
        if kind is bool:
            return _bool(value)
        if kind is int and value.lower() == "none":
            return None
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from exc


@dataclass
class ExperimentConfig:
    seed: int
    out: str = "out"
    data_source: str = "generate"
    n_benign: int = 20_000
    n_anomalous: int = 2_000
    labels: str = "generator"
    tasks: tuple[str, ...] = TASKS
    folds: int = 5
    test_fraction: float = 0.2
    contamination: float = 0.05
    semisup_models: tuple[str, ...] = SEMISUP_MODELS
    semisup_params: dict = field(default_factory=dict)
    binary_models: tuple[str, ...] = ("gradient_boosting",)
    multilabel_models: tuple[str, ...] = ("gradient_boosting",)
    grids: dict = field(default_factory=dict)
    binary_resample: str = "none"
    multilabel_resample: str = "mlsmote"
    compare_original: bool = True
    resample_k: int = 5
    smote_pct: int = 100
    lir_critical: float = 1.1
    nfiv_model: str = "gradient_boosting"
    nfiv_scope: str = "full"

    def validate(self) -> None:
        if self.folds < 2:
            raise ConfigError("experiment.folds must be >= 2")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("experiment.test_fraction must lie in (0, 1)")
        if not 0 < self.contamination < 0.5:
            raise ConfigError("semisup.contamination must lie in (0, 0.5)")
        if not self.tasks:
            raise ConfigError("no tasks configured")
        for t in self.tasks:
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r}")
        if self.labels not in ("generator", "heuristics"):
            raise ConfigError("data.labels must be 'generator' or 'heuristics'")
        checks = [("semisup", self.semisup_models, SEMISUP_MODELS), ("binary", self.binary_models, SUPERVISED_MODELS),
                  ("multilabel", self.multilabel_models, SUPERVISED_MODELS)]
        for task, models, allowed in checks:
            if task in self.tasks and not models:
                raise ConfigError(f"{task}.models is empty")
            for m in models:
                if m not in allowed:
                    raise ConfigError(f"{task}.models: unknown model {m!r}")
            if len(set(models)) != len(models):
                raise ConfigError(f"{task}.models lists a model twice")
        if self.binary_resample not in ("none", "smote"):
            raise ConfigError("binary.resample must be 'none' or 'smote'")
        if self.multilabel_resample not in ("none", "mlsmote"):
            raise ConfigError("multilabel.resample must be 'none' or 'mlsmote'")
        if self.nfiv_model not in ("cart", "random_forest", "gradient_boosting"):
            raise ConfigError("nfiv.model must be a tree model")
        if self.nfiv_scope not in ("full", "anomalous"):
            raise ConfigError("nfiv.scope must be 'full' or 'anomalous'")
        for alg, grid in self.grids.items():
            if any(len(v) == 0 for v in grid.values()):
                raise ConfigError(f"grid.{alg} has an empty value list")

    def grid(self, algorithm: str) -> dict[str, list]:
        return {**DEFAULT_GRIDS.get(algorithm, {}), **self.grids.get(algorithm, {})}

    def canonical(self) -> dict:
        d = asdict(self)
        d.pop("out")
        return d

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_SCALARS = {
    "seed": ("seed", int),
    "output.dir": ("out", str),
    "data.source": ("data_source", str),
    "data.n_benign": ("n_benign", int),
    "data.n_anomalous": ("n_anomalous", int),
    "data.labels": ("labels", str),
    "experiment.folds": ("folds", int),
    "experiment.test_fraction": ("test_fraction", float),
    "semisup.contamination": ("contamination", float),
    "binary.resample": ("binary_resample", str),
    "multilabel.resample": ("multilabel_resample", str),
    "multilabel.compare_original": ("compare_original", bool),
    "resample.k": ("resample_k", int),
    "resample.smote_pct": ("smote_pct", int),
    "resample.lir_critical": ("lir_critical", float),
    "nfiv.model": ("nfiv_model", str),
    "nfiv.scope": ("nfiv_scope", str),
}
_LISTS = {
    "experiment.tasks": "tasks",
    "semisup.models": "semisup_models",
    "binary.models": "binary_models",
    "multilabel.models": "multilabel_models",
}


def config_from_mapping(raw: dict[str, str], seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    kw: dict = {}
    semisup_params: dict = {}
    grids: dict = {}
    for key, value in raw.items():
        if key in _SCALARS:
            name, kind = _SCALARS[key]
            kw[name] = _convert(key, value, kind)
        elif key in _LISTS:
            kw[_LISTS[key]] = tuple(_list(value))
        elif key.startswith("grid."):
            parts = key.split(".")
            if len(parts) != 3 or parts[1] not in _SUPERVISED_PARAMS:
                raise ConfigError(f"bad grid key {key!r}")
            _, alg, param = parts
            kind = _SUPERVISED_PARAMS[alg].get(param)
            if kind is None:
                raise ConfigError(f"{alg} has no hyperparameter {param!r}")
            grids.setdefault(alg, {})[param] = [_convert(key, v, kind) for v in _list(value)]
        elif key.startswith("semisup.") and key.count(".") == 2:
            _, alg, param = key.split(".")
            kind = _SEMISUP_PARAMS.get(alg, {}).get(param)
            if kind is None:
                raise ConfigError(f"unknown semi-supervised setting {key!r}")
            semisup_params.setdefault(alg, {})[param] = _convert(key, value, kind)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    if seed is not None:
        kw["seed"] = seed
    if out is not None:
        kw["out"] = out
    if "seed" not in kw:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    cfg = ExperimentConfig(semisup_params=semisup_params, grids=grids, **kw)
    cfg.validate()
    return cfg


def load_config(path: str | None, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    raw: dict[str, str] = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_mapping(raw, seed, out)
