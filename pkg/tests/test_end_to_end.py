"""Desk-scale runs of the full decision pipeline on synthetic data with known answers."""

import numpy as np
import pytest

from reefdeploy.models.configs import DecisionConfig, TrainConfig
from reefdeploy.models.network import OutputActivation
from reefdeploy.models.schemas import DecisionRule, FrameLabel, GridClassification, GridSpec, PatchClass
from reefdeploy.services.decision_service import decide_batch, threshold_decision
from reefdeploy.services.metrics_service import best_alpha, confusion, pr_sweep, report
from reefdeploy.services.training_service import train, train_aggregation_network
from tests.helpers import one_hot_grid

ALPHAS = np.round(np.linspace(0.0, 1.0, 11), 10)


def brute_force_deploy(gc: GridClassification, alpha: float) -> bool:
    deploy = other = 0
    for dist in gc.distributions:
        probs = list(dist.probs)
        if probs.index(max(probs)) == int(PatchClass.DEPLOY):
            deploy += 1
        else:
            other += 1
    ratio = 1.0 if other == 0 else deploy / other
    return ratio >= alpha


def test_thresholding_matches_count_and_compare():
    rng = np.random.default_rng(17)
    grids = []
    for i in range(500):
        # skew some grids towards Deploy so every ratio regime shows up
        concentration = np.array([1.0, 1.0, rng.uniform(0.2, 6.0)])
        probs = rng.dirichlet(concentration, size=28)
        grids.append(GridClassification.from_probabilities(f"g{i}", GridSpec(), probs))

    deploy_sets = []
    for alpha in ALPHAS:
        decisions = decide_batch(grids, DecisionConfig(alpha=float(alpha)))
        for gc, d in zip(grids, decisions):
            assert (d.decision is FrameLabel.DEPLOY) == brute_force_deploy(gc, float(alpha))
            assert d == threshold_decision(gc, float(alpha))
        deploy_sets.append({d.frame_id for d in decisions if d.decision is FrameLabel.DEPLOY})

    for looser, stricter in zip(deploy_sets, deploy_sets[1:]):
        assert stricter <= looser
    assert deploy_sets[0] == {g.frame_id for g in grids}
    assert 0 < len(deploy_sets[5]) < 500


BLOB_CENTERS = np.array([[0.0, 0.0], [7.0, 0.0], [0.0, 7.0]])


def imbalanced_blobs(per_class, seed):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(BLOB_CENTERS[c], 1.0, size=(n, 2)) for c, n in enumerate(per_class)])
    y = np.concatenate([np.full(n, c) for c, n in enumerate(per_class)])
    return x, y


BLOB_CONFIG = TrainConfig(epochs=40, batch_size=32, learning_rate=0.01, momentum=0.9, seed=7)


@pytest.fixture(scope="module")
def runs():
    x_train, y_train = imbalanced_blobs([2500, 250, 250], seed=1)
    x_test, y_test = imbalanced_blobs([5000, 500, 500], seed=2)
    weighted = train(x_train, y_train, [2, 3], BLOB_CONFIG)
    plain = train(x_train, y_train, [2, 3], BLOB_CONFIG.model_copy(update={"oversample": False, "class_weighting": False}))
    return x_test, y_test, weighted, plain


def held_out_report(result, x, y):
    preds = result.model.predict_proba(x).argmax(axis=1)
    return report(confusion(preds, y, 3, ("no_deploy", "coral", "deploy")))


class TestImbalancedPatchHead:
    def test_macro_f1_on_held_out_patches(self, runs):
        x_test, y_test, weighted, _ = runs
        assert held_out_report(weighted, x_test, y_test).macro_f1 >= 90.0

    def test_rebalancing_lifts_minority_recall(self, runs):
        _, _, weighted, plain = runs
        # minority-only set large enough to resolve rare misses
        x_minor, y_minor = imbalanced_blobs([0, 20000, 20000], seed=3)

        def minority_recall(result):
            r = held_out_report(result, x_minor, y_minor)
            return r.for_label("coral").recall + r.for_label("deploy").recall

        assert minority_recall(weighted) > minority_recall(plain)
        assert weighted.class_weights.weights == pytest.approx((1.2, 12.0, 12.0))
        assert plain.class_weights is None


def test_aggregation_network_learns_deploy_count():
    rng = np.random.default_rng(23)
    grids, truths = [], []
    for i in range(2000):
        k = int(rng.integers(0, 29))
        classes = rng.choice([int(PatchClass.NO_DEPLOY), int(PatchClass.CORAL)], size=28)
        classes[rng.choice(28, size=k, replace=False)] = int(PatchClass.DEPLOY)
        gc = one_hot_grid(f"a{i}", classes, confidence=0.9)
        grids.append(gc)
        truths.append((gc.frame_id, FrameLabel.DEPLOY if k >= 8 else FrameLabel.NO_DEPLOY))

    config = TrainConfig(epochs=100, batch_size=32, learning_rate=0.02, momentum=0.9, seed=3)
    result = train_aggregation_network(grids[:1600], truths[:1600], config, hidden=32)
    assert result.model.output is OutputActivation.SIGMOID
    assert result.final_loss < result.initial_loss

    curve = pr_sweep(
        grids[1600:],
        truths[1600:],
        DecisionRule.SPATIAL_PATCH_AGGREGATION,
        np.linspace(0.0, 1.0, 101),
        model=result.model,
    )
    assert best_alpha(curve, "accuracy").accuracy >= 95.0
