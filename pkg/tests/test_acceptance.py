"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The whole module takes several minutes; most of it is the ten benchmark
trials and the two end-to-end CLI runs.
"""

import itertools
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from oracles import brute_force, pairwise_auc
from streamshield.autoencoder import check_gradients, train_autoencoder
from streamshield.config import config_from_mapping, parse_config_text
from streamshield.metrics import fbeta, multilabel_metrics, roc_auc
from streamshield.pipeline import (
    ReportBundle,
    derive_seed,
    holdout_split,
    load_data,
    run_binary,
    run_multilabel,
    run_semisup,
)
from streamshield.resampling import label_imbalance_ratio, resample_dataset, smote_binary
from streamshield.telemetry import CATEGORIES, DEFAULT_ARCHETYPES, fit_standardizer

BENCH_CFG = Path(__file__).parents[1] / "configs" / "bench.cfg"
TRIAL_SEEDS = range(42, 52)

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    outs = []
    for name in ("a", "b"):
        out = root / name
        proc = subprocess.run(
            [sys.executable, "-m", "streamshield.cli", "run", "--config", str(BENCH_CFG), "--seed", "42", "--out", str(out)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        outs.append(out / "report.json")
    return outs


@pytest.fixture(scope="module")
def bench_report(cli_runs):
    return json.loads(cli_runs[0].read_text())


def test_1_lir_fidelity(verdict):
    counts = {"content": 8741, "service": 13299, "account": 6005}
    n = max(counts.values())
    Y = np.zeros((n, 3), dtype=np.int8)
    for j, c in enumerate(CATEGORIES):
        Y[: counts[c], j] = 1
    got = label_imbalance_ratio(Y).lir
    want = np.array([1.521, 1.000, 2.215])
    ok = bool(np.all(np.abs(got - want) <= 0.001))
    assert verdict(1, ok, f"LIR {np.round(got, 4).tolist()} vs {want.tolist()} +/- 0.001"), got


def test_2_mlsmote_balancing(verdict, bench):
    out, synthetic = resample_dataset(bench, "multilabel", k=5, lir_critical=1.1, seed=0)
    n = len(bench)
    before = label_imbalance_ratio(bench.labels[bench.is_anomalous]).max_lir
    after = label_imbalance_ratio(out.labels[out.is_anomalous]).max_lir
    preserved = (
        np.array_equal(out.X[:n], bench.X)
        and np.array_equal(out.labels[:n], bench.labels)
        and not synthetic[:n].any()
        and synthetic[n:].all()
    )
    ok = after <= 1.1 and preserved
    detail = f"max LIR {before:.3f} -> {after:.4f} (<= 1.1) with {int(synthetic.sum())} synthetics; originals preserved={preserved}"
    assert verdict(2, ok, detail)


def test_3_smote_geometry(verdict, bench):
    Z = fit_standardizer(bench.X[bench.is_anomalous]).transform(bench.X[bench.is_anomalous])
    T, k, n_pct = len(Z), 5, 300
    synth, origin = smote_binary(Z, n_pct, k, seed=11, return_origin=True)
    # neighbour sets from brute-force distances, ties at the k-th distance included
    D = cdist(Z, Z)
    np.fill_diagonal(D, np.inf)
    radius = np.sort(D, axis=1)[:, k - 1]
    i, j = origin[:, 0], origin[:, 1]
    is_neighbour = D[i, j] <= radius[i] * (1 + 1e-12)
    d = Z[j] - Z[i]
    dd = (d * d).sum(axis=1)
    alpha = np.where(dd > 0, ((synth - Z[i]) * d).sum(axis=1) / np.where(dd > 0, dd, 1), 0.0)
    residual = np.abs(Z[i] + alpha[:, None] * d - synth).max(axis=1)
    good = is_neighbour & (alpha >= -1e-12) & (alpha <= 1 + 1e-12) & (residual < 1e-9)
    expected = T * (n_pct // 100)
    ok = bool(good.all()) and len(synth) == expected
    detail = f"{good.mean():.2%} of {len(synth)} synthetics reconstruct (max residual {residual.max():.1e}); count {len(synth)} == T*N/100 = {expected}"
    assert verdict(3, ok, detail)


def test_4_metrics_oracle(verdict):
    vectors = list(itertools.product((0, 1), repeat=3))
    pairs = list(itertools.product(vectors, vectors))
    suites = [[p] for p in pairs] + [list(pp) for pp in itertools.product(pairs, pairs)]
    rng = np.random.default_rng(4)
    for n in range(3, 9):
        for _ in range(500):
            suites.append([pairs[t] for t in rng.integers(0, 64, n)])
    keys = ("precision", "recall", "hamming_score", "emr", "hamming_loss")
    mismatches = 0
    for suite in suites:
        truth = np.array([y for y, _ in suite])
        pred = np.array([p for _, p in suite])
        got = multilabel_metrics(pred, truth).to_dict()
        want = brute_force(suite)
        mismatches += any(got[key] != want[key] for key in keys)
    f1 = fbeta(0.85, 0.88, 1.0)
    ok = mismatches == 0 and abs(f1 - 0.865) <= 5e-4
    detail = f"{len(suites)} datasets (all N=1, all N=2, 3000 random N=3..8), {mismatches} mismatches; f1(0.85, 0.88) = {f1:.5f}"
    assert verdict(4, ok, detail)


def test_5_auc_oracle(verdict):
    rng = np.random.default_rng(5)
    worst = worst_complement = 0.0
    for t in range(1000):
        n = int(rng.integers(2, 80))
        truth = rng.integers(0, 2, n)
        truth[:2] = [0, 1]
        # every other set has heavy ties
        scores = rng.integers(0, 6, n).astype(float) if t % 2 else rng.normal(size=n)
        a = roc_auc(scores, truth)
        worst = max(worst, abs(a - pairwise_auc(scores, truth)))
        worst_complement = max(worst_complement, abs(a + roc_auc(-scores, truth) - 1))
    ok = worst <= 1e-12 and worst_complement <= 1e-12
    assert verdict(5, ok, f"1000 score sets: max |rank - pairwise| {worst:.1e}, max |AUC(s)+AUC(-s)-1| {worst_complement:.1e}")


def test_6_gradient_check(verdict, small_bench):
    model = train_autoencoder(small_bench.X[:400], epochs=3, seed=2)
    Z = model.standardized(small_bench.X[400:406])
    errors = check_gradients(model, Z)
    ok = len(errors) == 2 * model.arch.n_layers and max(errors) < 1e-4
    assert verdict(6, ok, f"{len(errors)} parameter arrays (skips included), max relative error {max(errors):.1e} < 1e-4")


def _trial(seed):
    raw = parse_config_text(BENCH_CFG.read_text())
    raw.update({
        "semisup.models": "autoencoder, iforest",
        "binary.models": "gradient_boosting",
        "multilabel.models": "gradient_boosting",
        "multilabel.compare_original": "false",
    })
    cfg = config_from_mapping(raw, seed=seed)
    data = load_data(cfg)
    train, test = holdout_split(data.is_anomalous.astype(np.int8), cfg.test_fraction, derive_seed(cfg.seed, "split"))
    bundle = ReportBundle({})
    semi = run_semisup(cfg, data, train, test, bundle)["models"]
    binary = run_binary(cfg, data, train, test, bundle)["models"]
    multi = run_multilabel(cfg, data, bundle)["models"]
    return {
        "ae_auc": semi["autoencoder"]["test"]["roc_auc"],
        "if_auc": semi["iforest"]["test"]["roc_auc"],
        "gb_f1": binary["gradient_boosting"]["test"]["f1_score"],
        "ml_hs": multi["gradient_boosting"]["upsampled"]["test"]["hamming_score"],
    }


def test_7_benchmark_floors(verdict):
    floors = {"ae_auc": 0.90, "if_auc": 0.80, "gb_f1": 0.85, "ml_hs": 0.70}
    trials = [_trial(s) for s in TRIAL_SEEDS]
    passing = {key: sum(t[key] >= floor for t in trials) for key, floor in floors.items()}
    ok = all(v >= 8 for v in passing.values())
    parts = [f"{key}>={floors[key]}: {passing[key]}/10 (min {min(t[key] for t in trials):.3f})" for key in floors]
    assert verdict(7, ok, "; ".join(parts))


def test_8_upsampling_direction(verdict, bench_report):
    gb = bench_report["multilabel"]["models"]["gradient_boosting"]
    up = gb["upsampled"]["test"]["hamming_score"]
    orig = gb["original"]["test"]["hamming_score"]
    ok = up >= orig - 0.02
    assert verdict(8, ok, f"hamming_score with MLSMOTE {up:.4f} vs original {orig:.4f} (tolerance 0.02)")


def test_9_nfiv_sanity(verdict, bench_report):
    top3 = bench_report["nfiv"]["top3"]
    missing = {c: sorted(set(DEFAULT_ARCHETYPES[c]) - set(top3[c])) for c in CATEGORIES}
    ok = not any(missing.values())
    assert verdict(9, ok, "top-3 " + "; ".join(f"{c}: {', '.join(top3[c])}" for c in CATEGORIES)), missing


def test_10_determinism(verdict, cli_runs):
    a, b = (p.read_bytes() for p in cli_runs)
    ok = a == b
    assert verdict(10, ok, f"two CLI runs with seed 42: report.json {len(a)} bytes, identical={ok}")
