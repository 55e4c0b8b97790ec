import json
import os

import numpy as np
import pytest

from streamshield.config import ConfigError, config_from_mapping
from streamshield.pipeline import (
    PipelineError,
    ReportBundle,
    ResampleSpec,
    derive_seed,
    grid_search,
    holdout_split,
    iter_grid,
    run_experiment,
    stratified_kfold,
)

SMALL = {
    "seed": "5",
    "data.n_benign": "1500",
    "data.n_anomalous": "300",
    "experiment.folds": "2",
    "semisup.iforest.n_trees": "20",
    "semisup.ocsvm.rff_dim": "64",
    "semisup.ocsvm.epochs": "20",
    "semisup.autoencoder.epochs": "5",
    "binary.models": "gradient_boosting, cart",
    "grid.gradient_boosting.rounds": "10",
    "grid.gradient_boosting.learning_rate": "0.3",
    "grid.gradient_boosting.max_depth": "3",
    "grid.cart.max_depth": "3, 6",
    "multilabel.models": "cart",
    "nfiv.model": "cart",
}


def small_config(tmp_path, **overrides):
    raw = dict(SMALL, **{k.replace("__", "."): v for k, v in overrides.items()})
    return config_from_mapping(raw, out=str(tmp_path / "out"))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = config_from_mapping(SMALL, out=str(out / "report"))
    bundle = run_experiment(cfg)
    return cfg, bundle


class TestFolds:
    def test_two_positives_per_fold(self):
        y = np.array([1] * 10 + [0] * 90)
        for fold in stratified_kfold(y, 5, seed=3):
            assert y[fold].sum() == 2 and len(fold) == 20

    @pytest.mark.parametrize("k", [2, 3, 7])
    def test_partition(self, k, rng):
        y = rng.integers(0, 2, 101)
        folds = stratified_kfold(y, k, seed=1)
        allidx = np.concatenate(folds)
        assert len(allidx) == 101 and set(allidx) == set(range(101))

    def test_proportions_within_one(self, rng):
        y = rng.integers(0, 3, 500)
        folds = stratified_kfold(y, 4, seed=0)
        for c in range(3):
            per = np.array([(y[f] == c).sum() for f in folds])
            assert per.max() - per.min() <= 1

    def test_unique_combination_lands_once(self, rng):
        Y = np.zeros((60, 3), dtype=np.int8)
        Y[:20, 0] = 1
        Y[20:40, 1] = 1
        Y[40:59, 2] = 1
        Y[59] = 1
        folds = stratified_kfold(Y, 5, seed=2)
        assert sum(59 in f for f in folds) == 1
        assert sorted(np.concatenate(folds).tolist()) == list(range(60))

    def test_small_class(self):
        with pytest.raises(ValueError, match="fewer than k"):
            stratified_kfold([0] * 10 + [1] * 2, 3)

    def test_k_below_two(self):
        with pytest.raises(ValueError):
            stratified_kfold([0, 1, 0, 1], 1)

    def test_seeded(self, rng):
        y = rng.integers(0, 2, 50)
        a = stratified_kfold(y, 5, seed=9)
        b = stratified_kfold(y, 5, seed=9)
        assert all(np.array_equal(p, q) for p, q in zip(a, b))

    def test_holdout(self):
        y = np.array([1] * 20 + [0] * 80)
        train, test = holdout_split(y, 0.2, 4)
        assert len(test) == 20 and y[test].sum() == 4
        assert not set(train) & set(test)


def test_derive_seed():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") != derive_seed(2, "a")
    assert 0 <= derive_seed(7, "x", 3) < 2**63


def test_iter_grid_order():
    assert iter_grid({"a": [1, 2], "b": ["x"]}) == [{"a": 1, "b": "x"}, {"a": 2, "b": "x"}]
    assert iter_grid({}) == [{}]
    with pytest.raises(ConfigError):
        iter_grid({"a": []})


class TestGridSearch:
    def test_single_point(self, small_bench):
        gs = grid_search("binary", "cart", {"max_depth": [4]}, small_bench, folds=2)
        assert gs.best_params == {"max_depth": 4}
        assert len(gs.rows) == 1 and len(gs.rows[0]["folds"]) == 2

    def test_degenerate_loses(self, small_bench):
        gs = grid_search("binary", "cart", {"max_depth": [0, 4]}, small_bench, folds=3)
        assert gs.best_params == {"max_depth": 4}

    def test_tie_keeps_earlier(self, small_bench):
        # min_leaf is irrelevant at depth 0, so both points score identically
        gs = grid_search("binary", "cart", {"min_leaf": [3, 1], "max_depth": [0]}, small_bench, folds=2)
        assert gs.best_params["min_leaf"] == 3

    def test_fit_inputs_exclude_validation_fold(self, small_bench):
        anomalous = small_bench.subset(small_bench.is_anomalous)
        log = []
        gs = grid_search(
            "multilabel", "cart", {"max_depth": [3]}, anomalous, folds=3, seed=1,
            resample=ResampleSpec("mlsmote"), fit_log=log,
        )
        split = stratified_kfold(anomalous.labels, 3, derive_seed(1, "cv"))
        assert {e["stage"] for e in log} == {"resample", "standardize", "model"}
        for entry in log:
            _, fi = entry["tag"]
            assert not set(entry["rows"]) & set(split[fi])
            assert len(entry["rows"]) + len(split[fi]) == len(anomalous)
        assert gs.metric == "hamming_score"

    def test_global_resampling_differs(self, bench):
        anomalous = bench.subset(bench.is_anomalous)
        kw = dict(folds=3, seed=0, resample=ResampleSpec("mlsmote"))
        fold = grid_search("multilabel", "cart", {"max_depth": [8]}, anomalous, **kw)
        leak = grid_search("multilabel", "cart", {"max_depth": [8]}, anomalous, resample_scope="global", **kw)
        assert fold.best["mean"]["hamming_score"] != leak.best["mean"]["hamming_score"]

    def test_bad_scope(self, small_bench):
        with pytest.raises(ValueError):
            grid_search("binary", "cart", {}, small_bench, resample_scope="everywhere")

    def test_fold_failure_names_stage(self, small_bench):
        with pytest.raises(PipelineError, match="grid0:fold0"):
            grid_search("binary", "knn", {"k": [10**6]}, small_bench, folds=2)


class TestReportBundle:
    def test_atomic_write(self, tmp_path):
        out = tmp_path / "r"
        out.mkdir()
        (out / "stale.txt").write_text("old")
        ReportBundle({"b": 1, "a": np.float64(0.5)}, {"t": [["x"], [1.5]]}, {"p": [["y"], [2]]}).write(str(out))
        assert not (out / "stale.txt").exists()
        text = (out / "report.json").read_text()
        assert text.index('"a"') < text.index('"b"')
        assert (out / "tables" / "t.csv").read_text() == "x\n1.5\n"
        assert (out / "plotdata" / "p.csv").exists()
        assert [p.name for p in tmp_path.iterdir()] == ["r"]

    def test_failed_write_leaves_nothing(self, tmp_path):
        bundle = ReportBundle({"x": object()})
        with pytest.raises(TypeError):
            bundle.write(str(tmp_path / "r"))
        assert list(tmp_path.iterdir()) == []

    def test_nan_becomes_null(self):
        assert json.loads(ReportBundle({"v": float("nan")}).to_json()) == {"v": None}


class TestRunExperiment:
    def test_semisup_rows(self, small_run):
        _, bundle = small_run
        table = bundle.tables["semisup"]
        assert [r[0] for r in table[1:]] == ["OC-SVM", "Isolation Forest", "Elliptic Envelope", "LOF", "Deep Autoencoder"]
        assert all(v is not None for r in table[1:] for v in r)

    def test_multilabel_paired(self, small_run):
        _, bundle = small_run
        cart = bundle.report["multilabel"]["models"]["cart"]
        assert set(cart) == {"upsampled", "original"}
        lir = bundle.report["multilabel"]["lir"]
        assert max(v["lir"] for v in lir["after"].values()) <= 1.1

    def test_every_model_once(self, small_run):
        cfg, bundle = small_run
        assert list(bundle.report["binary"]["models"]) == list(cfg.binary_models)
        assert list(bundle.report["semisup"]["models"]) == list(cfg.semisup_models)

    def test_provenance(self, small_run):
        cfg, bundle = small_run
        prov = bundle.report["provenance"]
        assert prov["config_sha256"] == cfg.digest() and prov["seed"] == 5
        assert {"streamshield", "numpy", "python"} <= set(prov["versions"])

    def test_outputs_written(self, small_run):
        cfg, _ = small_run
        tables = set(os.listdir(os.path.join(cfg.out, "tables")))
        plots = set(os.listdir(os.path.join(cfg.out, "plotdata")))
        assert {"semisup.csv", "binary.csv", "multilabel.csv", "lir.csv", "nfiv.csv"} <= tables
        assert {"mse_histogram.csv", "correlation_benign.csv", "nfiv_content.csv", "lir.csv"} <= plots

    def test_rerun_byte_identical(self, small_run, tmp_path):
        cfg, bundle = small_run
        again = run_experiment(config_from_mapping(SMALL, out=str(tmp_path / "again")))
        assert again.to_json() == bundle.to_json()
        with open(f"{cfg.out}/report.json") as fh:
            assert fh.read() == (tmp_path / "again" / "report.json").read_text()

    def test_nfiv_block(self, small_run):
        _, bundle = small_run
        nfiv = bundle.report["nfiv"]
        for c in ("content", "service", "account"):
            assert sum(nfiv["values"][c].values()) == pytest.approx(1.0, abs=1e-9)
            assert len(nfiv["top3"][c]) == 3

    def test_stage_failure_cleans_up(self, tmp_path):
        cfg = small_config(tmp_path, data__source=str(tmp_path / "missing.csv"))
        with pytest.raises(PipelineError, match=r"\[load\]"):
            run_experiment(cfg)
        assert not (tmp_path / "out").exists()

    def test_heuristic_labels(self, tmp_path):
        cfg = small_config(tmp_path, data__labels="heuristics", experiment__tasks="binary", binary__models="cart")
        bundle = run_experiment(cfg, write=False)
        assert "cart" in bundle.report["binary"]["models"]
