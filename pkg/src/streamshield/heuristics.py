"""Heuristic rule engine: tag accounts with named rules, map tags to fraud categories."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .telemetry import CATEGORIES, AccountDayRecord, Dataset, LabelVector

Predicate = Callable[[AccountDayRecord], bool]

DEFAULT_THRESHOLDS: dict[str, float] = {
    "T1": 100.0,  # licenses per day
    "T2": 50.0,  # licenses per distinct streaming hour
    "T3": 0.2,  # expected-message share floor
    "T4": 0.5,  # device-type share
    "T5": 0.05,  # matched DRM share
}


@dataclass(frozen=True)
class HeuristicRule:
    name: str
    predicate: Predicate
    categories: frozenset[str]
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        cats = frozenset(self.categories)
        if not cats:
            raise ValueError(f"rule {self.name!r} must map to at least one category")
        unknown = cats - set(CATEGORIES)
        if unknown:
            raise ValueError(f"rule {self.name!r} has unknown categories {sorted(unknown)}")
        object.__setattr__(self, "categories", cats)

    def __call__(self, record: AccountDayRecord) -> bool:
        return bool(self.predicate(record))


@dataclass(frozen=True)
class TagResult:
    """(account_id, rule name) pairs in record order, then rule order."""

    tags: tuple[tuple[str, str], ...]
    account_ids: tuple[str, ...]

    def labels(self, rules: Sequence[HeuristicRule]) -> list[LabelVector]:
        return map_tags_to_labels(self, rules)

    def fired(self, account_id: str) -> list[str]:
        return [name for acct, name in self.tags if acct == account_id]


def _check_unique(rules: Sequence[HeuristicRule]) -> None:
    seen: set[str] = set()
    for r in rules:
        if r.name in seen:
            raise ValueError(f"duplicate rule name {r.name!r}")
        seen.add(r.name)


def labeling_anomalies(
    data: Dataset | Iterable[AccountDayRecord],
    rules: Sequence[HeuristicRule],
) -> TagResult:
    """Evaluate every rule on every record and collect the tags that fire."""
    _check_unique(rules)
    records = data.records() if isinstance(data, Dataset) else iter(data)
    tags: list[tuple[str, str]] = []
    seen: set[tuple[str, str]] = set()
    ids: list[str] = []
    for record in records:
        ids.append(record.account_id)
        for rule in rules:
            if rule(record):
                tag = (record.account_id, rule.name)
                if tag not in seen:
                    seen.add(tag)
                    tags.append(tag)
    return TagResult(tuple(tags), tuple(ids))


def map_tags_to_labels(tag_result: TagResult, rules: Sequence[HeuristicRule]) -> list[LabelVector]:
    """Per-account union of the categories of fired rules, one vector per record."""
    by_name = {r.name: r for r in rules}
    per_account: dict[str, set[str]] = {}
    for account, name in tag_result.tags:
        rule = by_name.get(name)
        if rule is None:
            raise KeyError(f"tag references unknown rule {name!r}")
        per_account.setdefault(account, set()).update(rule.categories)
    return [
        LabelVector(*(int(c in per_account.get(acct, ())) for c in CATEGORIES))
        for acct in tag_result.account_ids
    ]


def label_dataset(dataset: Dataset, rules: Sequence[HeuristicRule]) -> tuple[Dataset, TagResult]:
    """Replace the dataset's labels with heuristic-derived ones."""
    tags = labeling_anomalies(dataset, rules)
    return dataset.with_labels(map_tags_to_labels(tags, rules)), tags


# ---------------------------------------------------------------------------
# Built-in rules


def many_licenses_heuristic(record: AccountDayRecord, thresh: float) -> bool:
    if thresh <= 0:
        raise ValueError("threshold must be positive")
    return record.license_cnt > thresh


def _rapid_license_acquisition(record: AccountDayRecord, thresh: float) -> bool:
    return record.license_cnt / max(record.dist_hour_cnt, 1.0) > thresh


def _many_failed_attempts(record: AccountDayRecord, floor: float) -> bool:
    # a low share of expected messages stands in for a high share of errors
    return record.expect_msg_pct < floor


_DEV_DRM_PAIRS = (("dev_type_a_pct", "drm_type_a_pct"), ("dev_type_b_pct", "drm_type_b_pct"), ("dev_type_c_pct", "drm_type_c_pct"))


def _unusual_dev_drm_combo(record: AccountDayRecord, dev_share: float, drm_share: float) -> bool:
    return any(getattr(record, dev) > dev_share and getattr(record, drm) < drm_share for dev, drm in _DEV_DRM_PAIRS)


def builtin_rules(params: Mapping[str, float] | None = None) -> list[HeuristicRule]:
    """The four built-in rules with thresholds T1..T5 (defaults in DEFAULT_THRESHOLDS)."""
    p = dict(DEFAULT_THRESHOLDS)
    if params:
        unknown = set(params) - set(p)
        if unknown:
            raise ValueError(f"unknown heuristic parameter(s) {sorted(unknown)}")
        p.update({k: float(v) for k, v in params.items()})
    bad = [k for k, v in p.items() if not v > 0]
    if bad:
        raise ValueError(f"heuristic thresholds must be positive: {bad}")
    t1, t2, t3, t4, t5 = (p[k] for k in ("T1", "T2", "T3", "T4", "T5"))
    return [
        HeuristicRule(
            "many_licenses",
            lambda r: many_licenses_heuristic(r, t1),
            frozenset({"service"}),
            {"T1": t1},
        ),
        HeuristicRule(
            "rapid_license_acquisition",
            lambda r: _rapid_license_acquisition(r, t2),
            frozenset({"content", "service"}),
            {"T2": t2},
        ),
        HeuristicRule(
            "many_failed_attempts",
            lambda r: _many_failed_attempts(r, t3),
            frozenset({"account"}),
            {"T3": t3},
        ),
        HeuristicRule(
            "unusual_dev_drm_combo",
            lambda r: _unusual_dev_drm_combo(r, t4, t5),
            frozenset({"content"}),
            {"T4": t4, "T5": t5},
        ),
    ]
