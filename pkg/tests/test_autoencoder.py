import numpy as np
import pytest

from streamshield.autoencoder import (
    AeArchitecture,
    AeModel,
    check_gradients,
    cosine_lr,
    forward,
    loss_and_grads,
    per_feature_mse_profile,
    reconstruction_mse,
    select_threshold,
    train_autoencoder,
)
from streamshield.telemetry import (
    DEFAULT_ARCHETYPES,
    FEATURE_INDEX,
    FEATURES,
    N_FEATURES,
    Standardizer,
    benign_reference_scale,
    sanitize,
)

IDENTITY = Standardizer(np.zeros(N_FEATURES), np.ones(N_FEATURES))


@pytest.fixture(scope="module")
def benign_split(bench):
    benign = bench.X[~bench.is_anomalous]
    return benign[:16000], benign[16000:]


@pytest.fixture(scope="module")
def trained(benign_split):
    train, _ = benign_split
    return train_autoencoder(train, seed=1)


@pytest.fixture(scope="module")
def seed_models(benign_split):
    train, held = benign_split
    models = [train_autoencoder(train, seed=s) for s in range(5)]
    return [(m, select_threshold(m, held, 0.95)) for m in models]


def archetype_point(base, category):
    x = np.array(base, dtype=float)
    scale = benign_reference_scale()
    for f, s in DEFAULT_ARCHETYPES[category].items():
        x[FEATURE_INDEX[f]] += s * scale[FEATURE_INDEX[f]]
    return sanitize(x[None, :])


class TestArchitecture:
    def test_default_shape(self):
        arch = AeArchitecture()
        assert arch.widths == (23, 16, 8, 4, 8, 16, 23)
        assert arch.skips == ((4, 2), (5, 1))

    def test_no_input_output_skip(self):
        assert all(s != 0 for _, s in AeArchitecture().skips)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            AeArchitecture((23, 16, 4, 8, 23), ((3, 1),))

    def test_backward_skip_rejected(self):
        with pytest.raises(ValueError):
            AeArchitecture((23, 16, 4, 16, 23), ((1, 3),))

    def test_needs_bottleneck(self):
        with pytest.raises(ValueError):
            AeArchitecture((4, 8, 4))

    def test_dict_round_trip(self):
        arch = AeArchitecture((6, 4, 2, 4, 6))
        assert AeArchitecture.from_dict(arch.to_dict()) == arch


class TestGradients:
    def test_six_record_fixture(self, small_bench):
        X = small_bench.X[:400]
        model = train_autoencoder(X, epochs=3, seed=2)
        Z = model.standardized(small_bench.X[400:406])
        errors = check_gradients(model, Z)
        assert len(errors) == 2 * model.arch.n_layers
        assert max(errors) < 1e-4

    def test_skip_paths_contribute(self, rng):
        arch = AeArchitecture((5, 4, 2, 4, 5))
        plain = AeArchitecture((5, 4, 2, 4, 5), ())
        W = [rng.normal(size=(a, b)) for a, b in zip(arch.widths, arch.widths[1:])]
        b = [rng.normal(size=w) for w in arch.widths[1:]]
        Z = rng.normal(size=(6, 5))
        _, g_skip, _ = loss_and_grads(arch, W, b, Z)
        _, g_plain, _ = loss_and_grads(plain, W, b, Z)
        assert not np.allclose(g_skip[0], g_plain[0])
        model = AeModel(arch, tuple(W), tuple(b), Standardizer(np.zeros(5), np.ones(5)))
        assert max(check_gradients(model, Z)) < 1e-4

    def test_forward_adds_skip(self, rng):
        arch = AeArchitecture((3, 2, 1, 2, 3))
        W = [np.zeros((a, b)) for a, b in zip(arch.widths, arch.widths[1:])]
        b = [np.zeros(w) for w in arch.widths[1:]]
        b[0][:] = [1.0, 2.0]
        a, _ = forward(arch, W, b, np.zeros((1, 3)))
        assert a[3].tolist() == [[1.0, 2.0]]


class TestTraining:
    def test_zero_weights_reconstruct_zero(self, rng):
        arch = AeArchitecture()
        W = tuple(np.zeros((a, b)) for a, b in zip(arch.widths, arch.widths[1:]))
        b = tuple(np.zeros(w) for w in arch.widths[1:])
        X = rng.normal(size=(20, N_FEATURES))
        model = AeModel(arch, W, b, IDENTITY)
        np.testing.assert_allclose(reconstruction_mse(model, X), (X**2).mean(axis=1), rtol=1e-15)

    def test_memorises_single_point(self, rng):
        x = rng.normal(size=(1, N_FEATURES))
        model = train_autoencoder(np.repeat(x, 64, axis=0), epochs=200, batch=64, lr=1e-2, seed=0, standardization=IDENTITY)
        assert reconstruction_mse(model, x)[0] < 1e-4

    def test_deterministic(self, small_bench):
        X = small_bench.X[:300]
        a = train_autoencoder(X, epochs=4, seed=9)
        b = train_autoencoder(X, epochs=4, seed=9)
        assert all(np.array_equal(p, q) for p, q in zip(a.weights + a.biases, b.weights + b.biases))

    def test_loss_falls(self, trained):
        hist = trained.loss_history
        assert len(hist) == 100
        assert hist[-1] < 0.25 * hist[0]

    def test_cosine_schedule(self):
        assert cosine_lr(1e-3, 0, 10) == 1e-3
        assert cosine_lr(1e-3, 5, 10) == pytest.approx(5e-4)

    def test_bad_inputs(self, rng):
        with pytest.raises(ValueError):
            train_autoencoder(rng.normal(size=(1, N_FEATURES)))
        with pytest.raises(ValueError):
            train_autoencoder(rng.normal(size=(10, 5)))
        with pytest.raises(ValueError):
            train_autoencoder(rng.normal(size=(10, N_FEATURES)), lr=0)


class TestScoring:
    def test_training_point_below_benign_p99(self, trained, benign_split):
        train, held = benign_split
        p99 = np.quantile(reconstruction_mse(trained, held), 0.99)
        assert (reconstruction_mse(trained, train[:200]) < p99).mean() >= 0.95
        assert reconstruction_mse(trained, np.median(train, axis=0)[None, :])[0] < p99

    @pytest.mark.xfail(strict=True, reason="archetype points clear the benign 95th-percentile MSE in too few seeds; see notes")
    @pytest.mark.parametrize("category", ["content", "service", "account"])
    def test_archetype_point_exceeds_threshold(self, category, seed_models, benign_split):
        train, _ = benign_split
        x = archetype_point(np.median(train, axis=0), category)
        hits = [reconstruction_mse(model, x)[0] > thr for model, thr in seed_models]
        assert np.mean(hits) >= 0.9

    def test_threshold_quantile_one(self, trained, benign_split):
        _, held = benign_split
        thr = select_threshold(trained, held[:300], 1.0)
        assert thr == reconstruction_mse(trained, held[:300]).max()
        assert trained.with_threshold(thr).predict(held[:300]).sum() == 0

    def test_threshold_five_of_hundred(self, trained, benign_split):
        _, held = benign_split
        v = held[:100]
        thr = select_threshold(trained, v, 0.95)
        assert (reconstruction_mse(trained, v) > thr).sum() == 5

    def test_profile_shape_and_top_features(self, trained, bench):
        prof = per_feature_mse_profile(trained, bench.X, bench.labels)
        assert prof.shape == (N_FEATURES, 2)
        top5 = [FEATURES[i] for i in np.argsort(-prof[:, 1], kind="stable")[:5]]
        assert "license_cnt" in top5

    def test_profile_needs_both_classes(self, trained, bench):
        benign = ~bench.is_anomalous
        with pytest.raises(ValueError):
            per_feature_mse_profile(trained, bench.X[benign], bench.labels[benign])

    def test_artifact_round_trip(self, trained, tmp_path, bench):
        model = trained.with_threshold(0.7)
        model.save(tmp_path / "ae.json")
        back = AeModel.load(tmp_path / "ae.json")
        assert np.array_equal(reconstruction_mse(back, bench.X[:50]), reconstruction_mse(model, bench.X[:50]))
        assert back.threshold == 0.7 and back.loss_history == model.loss_history

    def test_loss_csv(self, trained, tmp_path):
        trained.write_loss_csv(tmp_path / "loss.csv")
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss" and len(lines) == 101
