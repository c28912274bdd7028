import math

import numpy as np
import pandas as pd
import pytest

from reefdeploy.exceptions import (
    AlignmentError,
    DivergenceError,
    InvalidProbabilityError,
    NoLabelsError,
    NonFiniteError,
    ZeroCountError,
    ZeroProbabilityError,
)
from reefdeploy.models.configs import ClassWeights, FocalLossConfig, TrainConfig
from reefdeploy.models.network import OutputActivation, load_model, save_model
from reefdeploy.models.schemas import DatasetManifest, FrameLabel, FrameRecord, GridSpec, PatchFeatures
from reefdeploy.services.classification_service import FeatureStore
from reefdeploy.services.training_service import (
    compute_class_weights,
    focal_loss,
    focal_loss_from_logits,
    focal_loss_gradient,
    oversample_schedule,
    train,
    train_aggregation_network,
    train_frame_head,
    train_patch_head,
    write_loss_trace,
)
from tests.helpers import counted_grid

CENTERS = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
HEAD_CONFIG = TrainConfig(epochs=60, batch_size=16, learning_rate=0.02, momentum=0.9, seed=1)


def blobs(per_class, seed=0, std=0.5):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(CENTERS[c], std, size=(n, 2)) for c, n in enumerate(per_class)])
    y = np.concatenate([np.full(n, c) for c, n in enumerate(per_class)])
    return x, y


def reference_cross_entropy(logits, labels):
    total = 0.0
    for row, label in zip(logits, labels):
        exps = [math.exp(v) for v in row]
        total -= math.log(exps[label] / sum(exps))
    return total / len(labels)


class TestClassWeights:
    def test_known_counts(self):
        assert compute_class_weights([50, 25, 25]).weights == (2.0, 4.0, 4.0)

    def test_weight_times_count_is_total(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            counts = rng.integers(1, 10_000, size=rng.integers(2, 6))
            weights = np.asarray(compute_class_weights(counts).weights)
            np.testing.assert_allclose(weights * counts, counts.sum(), rtol=1e-12)

    @pytest.mark.parametrize("counts", [[10, 0, 5], [], [3, -1]])
    def test_empty_class(self, counts):
        with pytest.raises(ZeroCountError):
            compute_class_weights(counts)


class TestFocalLoss:
    def test_closed_form(self):
        assert focal_loss([0.5], [0], FocalLossConfig(gamma=2.0)) == pytest.approx(0.25 * math.log(2), abs=1e-12)

    def test_gamma_zero_is_cross_entropy(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(16, 3))
        labels = rng.integers(0, 3, size=16)
        loss, clamped = focal_loss_from_logits(logits, labels, FocalLossConfig(gamma=0.0))
        assert clamped == 0
        assert loss == pytest.approx(reference_cross_entropy(logits, labels), abs=1e-12)

    def test_class_weights_scale_samples(self):
        config = FocalLossConfig(gamma=0.0, class_weights=ClassWeights(weights=(1.0, 3.0)))
        assert focal_loss([0.5, 0.5], [0, 1], config) == pytest.approx(2.0 * math.log(2))

    def test_confident_samples_are_down_weighted(self):
        ce = focal_loss([0.9], [0], FocalLossConfig(gamma=0.0))
        focal = focal_loss([0.9], [0], FocalLossConfig(gamma=2.0))
        assert focal == pytest.approx(0.01 * ce)

    def test_loss_never_grows_with_true_class_probability(self):
        rng = np.random.default_rng(8)
        for gamma in (0.0, 0.5, 2.0):
            for _ in range(200):
                n = int(rng.integers(1, 8))
                weights = ClassWeights(weights=tuple(rng.uniform(0.5, 4.0, size=3)))
                config = FocalLossConfig(gamma=gamma, class_weights=weights)
                labels = rng.integers(0, 3, size=n)
                lower = rng.uniform(1e-6, 1.0, size=n)
                i = int(rng.integers(0, n))
                higher = lower.copy()
                higher[i] = rng.uniform(lower[i], 1.0)
                assert focal_loss(higher, labels, config) <= focal_loss(lower, labels, config) + 1e-12

    def test_invalid_probabilities(self):
        config = FocalLossConfig()
        with pytest.raises(ZeroProbabilityError):
            focal_loss([0.5, 0.0], [0, 1], config)
        with pytest.raises(InvalidProbabilityError):
            focal_loss([1.5], [0], config)
        with pytest.raises(NonFiniteError):
            focal_loss([math.nan], [0], config)

    def test_floor_counts_clamps(self):
        loss, clamped = focal_loss_from_logits(np.array([[0.0, 60.0]]), [0], FocalLossConfig(gamma=0.0))
        assert clamped == 1
        assert loss == pytest.approx(-math.log(1e-12))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        h = 1e-5
        for trial in range(100):
            n = int(rng.integers(1, 9))
            c = int(rng.choice([2, 3]))
            gamma = float(rng.choice([0.0, 0.5, 2.0]))
            weights = ClassWeights(weights=tuple(rng.uniform(0.5, 4.0, size=c)))
            config = FocalLossConfig(gamma=gamma, class_weights=weights)
            z = rng.normal(size=(n, c))
            y = rng.integers(0, c, size=n)

            analytic = focal_loss_gradient(z, y, config)
            numeric = np.zeros_like(z)
            for i in range(n):
                for j in range(c):
                    up, down = z.copy(), z.copy()
                    up[i, j] += h
                    down[i, j] -= h
                    numeric[i, j] = (
                        focal_loss_from_logits(up, y, config)[0] - focal_loss_from_logits(down, y, config)[0]
                    ) / (2 * h)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-9, err_msg=f"trial {trial}")

    def test_gradient_at_certainty(self):
        grad = focal_loss_gradient(np.array([[0.0, 800.0]]), [1], FocalLossConfig(gamma=0.5))
        assert np.all(np.isfinite(grad))
        np.testing.assert_allclose(grad, 0.0, atol=1e-300)


class TestOversampling:
    def test_classes_drawn_evenly(self):
        labels = np.array([0] * 900 + [1] * 50 + [2] * 50)
        drawn = labels[oversample_schedule(labels, seed=3, epoch_len=30_000)]
        np.testing.assert_allclose(np.bincount(drawn) / drawn.size, 1 / 3, atol=0.02)

    def test_same_seed_same_schedule(self):
        labels = [0, 0, 0, 1]
        assert np.array_equal(oversample_schedule(labels, seed=9), oversample_schedule(labels, seed=9))
        assert oversample_schedule(labels).shape == (4,)

    def test_empty(self):
        with pytest.raises(NoLabelsError):
            oversample_schedule([])


class TestTrain:
    config = TrainConfig(epochs=20, batch_size=16, learning_rate=0.02, momentum=0.9, seed=1)

    def test_separable_blobs(self):
        x, y = blobs([200, 200, 200])
        result = train(x, y, [2, 3], self.config)
        accuracy = np.mean(result.model.predict_proba(x).argmax(axis=1) == y)
        assert accuracy >= 0.99
        assert result.final_loss < result.initial_loss
        assert len(result.loss_trace) == 20
        assert result.class_weights.weights == pytest.approx((3.0, 3.0, 3.0))

    def test_same_seed_is_bit_identical(self):
        x, y = blobs([60, 20, 20], seed=4)
        a = train(x, y, [2, 4, 3], self.config)
        b = train(x, y, [2, 4, 3], self.config)
        c = train(x, y, [2, 4, 3], self.config.model_copy(update={"seed": 2}))
        assert all(np.array_equal(p, q) for p, q in zip(a.model.parameters(), b.model.parameters()))
        assert a.loss_trace == b.loss_trace
        assert not np.array_equal(a.model.weights[0], c.model.weights[0])

    def test_zero_epochs_returns_initialisation(self, tmp_path):
        x, y = blobs([10, 10, 10])
        config = self.config.model_copy(update={"epochs": 0})
        a = train(x, y, [2, 3], config)
        b = train(x, y, [2, 3], config)
        assert a.loss_trace == ()
        assert a.final_loss == a.initial_loss
        assert np.array_equal(a.model.weights[0], b.model.weights[0])
        assert not np.any(a.model.biases[0])

        save_model(a.model, tmp_path / "init.json")
        loaded = load_model(tmp_path / "init.json")
        assert np.array_equal(loaded.weights[0], a.model.weights[0])
        assert loaded.train_config["epochs"] == 0

    def test_zero_learning_rate_keeps_initialisation(self):
        x, y = blobs([30, 10, 10], seed=5)
        frozen = train(x, y, [2, 4, 3], self.config.model_copy(update={"learning_rate": 0.0, "epochs": 5}))
        init = train(x, y, [2, 4, 3], self.config.model_copy(update={"epochs": 0}))
        assert len(frozen.loss_trace) == 5
        assert all(np.array_equal(p, q) for p, q in zip(frozen.model.parameters(), init.model.parameters()))

    def test_divergence(self):
        x, y = blobs([20, 20, 20])
        config = TrainConfig(epochs=5, batch_size=8, learning_rate=1e200, momentum=0.0)
        with pytest.raises(DivergenceError) as exc:
            train(x * 1e150, y, [2, 3], config)
        assert exc.value.epoch >= 1

    def test_empty_training_set(self):
        with pytest.raises(NoLabelsError):
            train(np.zeros((0, 2)), [], [2, 3], self.config)

    def test_sigmoid_output(self):
        x, y = blobs([100, 100])
        result = train(x, y, [2, 1], self.config, OutputActivation.SIGMOID)
        assert result.model.output is OutputActivation.SIGMOID
        assert np.mean((result.model.predict_proba(x) >= 0.5) == y) >= 0.99

    def test_loss_trace_csv(self, tmp_path):
        x, y = blobs([10, 10, 10])
        result = train(x, y, [2, 3], self.config.model_copy(update={"epochs": 3}))
        write_loss_trace(tmp_path / "trace.csv", result)
        df = pd.read_csv(tmp_path / "trace.csv")
        assert list(df.columns) == ["epoch", "loss"]
        assert df["epoch"].tolist() == [0, 1, 2, 3]
        assert df["loss"].iloc[0] == pytest.approx(result.initial_loss)


def feature_fixture():
    x, y = blobs([40, 40, 40], seed=8)
    order = np.random.default_rng(8).permutation(len(y))
    x, y = x[order], y[order]
    features, records = [], []
    for f in range(0, len(y), 6):
        frame_id = f"f{f // 6}"
        for i in range(6):
            features.append(PatchFeatures(frame_id=frame_id, patch_index=i, values=tuple(x[f + i])))
        records.append(FrameRecord(frame_id=frame_id, patch_labels=tuple(int(v) for v in y[f : f + 6])))
    grid = GridSpec(rows=2, cols=3)
    return FeatureStore.from_records(features), DatasetManifest(grid=grid, records=tuple(records)), x, y


class TestHeads:
    def test_patch_head_from_manifest(self):
        store, manifest, x, y = feature_fixture()
        result = train_patch_head(store, manifest, HEAD_CONFIG)
        assert result.model.layer_dims == [2, 3]
        assert np.mean(result.model.predict_proba(x).argmax(axis=1) == y) >= 0.99

    def test_frame_head(self):
        x, y = blobs([30, 30], seed=3)
        store = FeatureStore.from_records(PatchFeatures(frame_id=f"f{i}", values=tuple(v)) for i, v in enumerate(x))
        manifest = DatasetManifest(
            records=tuple(FrameRecord(frame_id=f"f{i}", ecologist_label=FrameLabel.from_index(c)) for i, c in enumerate(y))
        )
        result = train_frame_head(store, manifest, HEAD_CONFIG, hidden=(8,))
        assert result.model.layer_dims == [2, 8, 1]
        assert np.mean((result.model.predict_proba(x) >= 0.5) == y) >= 0.95

    def test_patch_head_without_labels(self):
        store, _, _, _ = feature_fixture()
        with pytest.raises(NoLabelsError):
            train_patch_head(store, DatasetManifest(records=(FrameRecord(frame_id="f0"),)), HEAD_CONFIG)


class TestAggregationNetwork:
    def test_shape_and_separation(self):
        grids = [counted_grid(f"g{k}", deploy=k) for k in range(29)] * 4
        grids = [g.model_copy(update={"frame_id": f"{g.frame_id}-{i}"}) for i, g in enumerate(grids)]
        truths = [(g.frame_id, FrameLabel.DEPLOY if g.count(2) >= 8 else FrameLabel.NO_DEPLOY) for g in grids]
        config = TrainConfig(epochs=60, batch_size=16, learning_rate=0.05, seed=0)
        result = train_aggregation_network(grids, truths, config, hidden=8)
        assert result.model.layer_dims == [84, 8, 1]
        assert result.final_loss < result.initial_loss

    def test_missing_label(self):
        grids = [counted_grid("a", deploy=3), counted_grid("b", deploy=20)]
        with pytest.raises(AlignmentError, match=r"label: b$"):
            train_aggregation_network(grids, [("a", FrameLabel.NO_DEPLOY)], TrainConfig(epochs=1))

    def test_no_frames(self):
        with pytest.raises(NoLabelsError):
            train_aggregation_network([], [], TrainConfig())
