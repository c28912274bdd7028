"""
Native training for the patch head, the whole-frame head and the spatial
aggregation network.

Loss is the class-weighted focal loss

    L = -(1/N) * sum_i w[y_i] * (1 - p_i)^gamma * log(p_i)

with p_i the softmax probability of sample i's true class and w[c] = N / N_c.
Optimisation is mini-batch gradient descent with momentum; initialisation and
the per-epoch sample order come from independent streams spawned off the
configured seed, so a run is reproducible end to end.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from reefdeploy.exceptions import (
    AlignmentError,
    DimensionMismatchError,
    DivergenceError,
    InvalidProbabilityError,
    NoLabelsError,
    NonFiniteError,
    ZeroCountError,
    ZeroProbabilityError,
)
from reefdeploy.models.configs import ClassWeights, FocalLossConfig, TrainConfig
from reefdeploy.models.network import MlpModel, OutputActivation, log_softmax
from reefdeploy.models.schemas import (
    NUM_PATCH_CLASSES,
    DatasetManifest,
    FrameTruths,
    GridClassification,
)
from reefdeploy.services.classification_service import FeatureStore
from reefdeploy.services.decision_service import aggregation_input
from reefdeploy.storage import write_frame_csv

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12
AGGREGATION_HIDDEN = 32


class TrainingResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    model: MlpModel
    initial_loss: float
    loss_trace: Tuple[float, ...] = ()
    clamped: int = 0
    class_weights: Optional[ClassWeights] = None

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1] if self.loss_trace else self.initial_loss


def compute_class_weights(counts: Sequence[int]) -> ClassWeights:
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 1 or counts.size == 0:
        raise ZeroCountError("class counts must be a non-empty vector")
    if np.any(counts <= 0):
        missing = [i for i, c in enumerate(counts) if c <= 0]
        raise ZeroCountError(f"classes {missing} have no training samples")
    total = counts.sum()
    return ClassWeights(weights=tuple(float(total / c) for c in counts))


def _sample_weights(labels: np.ndarray, focal: FocalLossConfig) -> np.ndarray:
    if focal.class_weights is None:
        return np.ones(labels.shape[0])
    weights = np.asarray(focal.class_weights.weights, dtype=float)
    if labels.size and labels.max() >= weights.shape[0]:
        raise DimensionMismatchError(f"label {labels.max()} has no class weight ({weights.shape[0]} weights)")
    return weights[labels]


def _as_labels(labels: Sequence[int], n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=int)
    if y.shape != (n,):
        raise DimensionMismatchError(f"{y.shape[0] if y.ndim else 0} labels for {n} samples")
    if n and y.min() < 0:
        raise DimensionMismatchError("labels must be non-negative class indices")
    return y


def focal_loss(probs_true: Sequence[float], labels: Sequence[int], config: FocalLossConfig) -> float:
    """Mean class-weighted focal loss given each sample's true-class probability."""
    p = np.asarray(probs_true, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise DimensionMismatchError("probabilities must be a non-empty vector")
    y = _as_labels(labels, p.shape[0])
    if not np.all(np.isfinite(p)):
        raise NonFiniteError("true-class probabilities must be finite")
    if np.any(p == 0.0):
        raise ZeroProbabilityError(f"{int(np.sum(p == 0.0))} samples have true-class probability 0 (loss is infinite)")
    if np.any((p < 0.0) | (p > 1.0)):
        raise InvalidProbabilityError("true-class probabilities must lie in (0, 1]")
    w = _sample_weights(y, config)
    return float(-np.mean(w * (1.0 - p) ** config.gamma * np.log(p)))


def focal_loss_from_logits(
    logits: np.ndarray,
    labels: Sequence[int],
    config: FocalLossConfig,
    floor: float = PROBABILITY_FLOOR,
) -> Tuple[float, int]:
    """Focal loss through a softmax; true-class probabilities are floored at ``floor``.

    Returns the loss and how many samples hit the floor.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=float))
    y = _as_labels(labels, z.shape[0])
    log_pt = log_softmax(z)[np.arange(z.shape[0]), y]
    log_floor = np.log(floor)
    clamped = int(np.sum(log_pt < log_floor))
    log_pt = np.maximum(log_pt, log_floor)
    w = _sample_weights(y, config)
    one_minus = -np.expm1(log_pt)
    return float(-np.mean(w * one_minus**config.gamma * log_pt)), clamped


def focal_loss_gradient(logits: np.ndarray, labels: Sequence[int], config: FocalLossConfig) -> np.ndarray:
    """Gradient of the mean focal loss with respect to the logits, shape ``(N, C)``.

    Per sample, dL/dz = A * (p - onehot(y)) / N with
    A = w[y] * ((1 - p_t)^gamma - gamma * p_t * (1 - p_t)^(gamma - 1) * log p_t).
    """
    z = np.atleast_2d(np.asarray(logits, dtype=float))
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("logits must be finite")
    n = z.shape[0]
    y = _as_labels(labels, n)
    if y.max(initial=0) >= z.shape[1]:
        raise DimensionMismatchError(f"label {y.max()} out of range for {z.shape[1]} classes")
    gamma = config.gamma

    log_p = log_softmax(z)
    p = np.exp(log_p)
    log_pt = log_p[np.arange(n), y]
    pt = np.exp(log_pt)
    one_minus = -np.expm1(log_pt)

    second = np.zeros(n)
    if gamma > 0:
        # the term vanishes as p_t -> 1 for every gamma > 0
        live = one_minus > 0
        second[live] = gamma * pt[live] * one_minus[live] ** (gamma - 1.0) * log_pt[live]
    a = _sample_weights(y, config) * (one_minus**gamma - second)

    onehot = np.zeros_like(p)
    onehot[np.arange(n), y] = 1.0
    grad = a[:, None] * (p - onehot) / n
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("focal loss gradient is not finite")
    return grad


def oversample_schedule(
    labels: Sequence[int],
    seed: int = 0,
    epoch_len: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Indices drawn with replacement, each sample weighted by N / N_{y_i}.

    Every class present is drawn equally often in expectation.
    """
    y = np.asarray(labels, dtype=int)
    if y.size == 0:
        raise NoLabelsError("cannot oversample an empty label set")
    counts = np.bincount(y)
    per_sample = y.size / counts[y]
    rng = rng if rng is not None else np.random.default_rng(seed)
    size = y.size if epoch_len is None else int(epoch_len)
    return rng.choice(y.size, size=size, replace=True, p=per_sample / per_sample.sum())


def _effective_focal(config: TrainConfig, labels: np.ndarray, num_classes: int) -> FocalLossConfig:
    focal = config.focal
    if config.class_weighting and focal.class_weights is None:
        counts = np.bincount(labels, minlength=num_classes)
        focal = FocalLossConfig(gamma=focal.gamma, class_weights=compute_class_weights(counts))
    return focal


def train(
    features: np.ndarray,
    labels: Sequence[int],
    layer_dims: Sequence[int],
    config: TrainConfig,
    output: OutputActivation = OutputActivation.SOFTMAX,
) -> TrainingResult:
    """Mini-batch gradient descent with momentum over the focal loss."""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    n = x.shape[0]
    if n == 0 or np.asarray(labels).size == 0:
        raise NoLabelsError("training set is empty")
    y = _as_labels(labels, n)
    if x.shape[1] != layer_dims[0]:
        raise DimensionMismatchError(f"features have {x.shape[1]} dims, architecture starts with {layer_dims[0]}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("training features must be finite")

    init_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = MlpModel.initialize(layer_dims, output, seed=config.seed, rng=np.random.default_rng(init_seq))
    model.train_config = config.describe()
    shuffle_rng = np.random.default_rng(shuffle_seq)
    if y.max() >= model.num_classes:
        raise DimensionMismatchError(f"label {y.max()} out of range for {model.num_classes} classes")

    focal = _effective_focal(config, y, model.num_classes)
    if focal.class_weights is not None:
        logger.info(f"Class weights: {[round(w, 4) for w in focal.class_weights.weights]}")

    initial_loss, clamped = focal_loss_from_logits(model.logits(x), y, focal)
    logger.info(
        f"Training {output.value} model {list(layer_dims)} on {n} samples for {config.epochs} epochs "
        f"(initial loss {initial_loss:.6f})"
    )

    velocity = [np.zeros_like(p) for p in model.parameters()]
    trace: List[float] = []
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, config.epochs + 1):
            order = oversample_schedule(y, rng=shuffle_rng) if config.oversample else shuffle_rng.permutation(n)
            for start in range(0, order.shape[0], config.batch_size):
                batch = order[start : start + config.batch_size]
                raw, activations = model.forward(x[batch])
                try:
                    grad = focal_loss_gradient(model.raw_to_logits(raw), y[batch], focal)
                except NonFiniteError:
                    raise DivergenceError(epoch, float("nan")) from None
                grad_raw = grad[:, 1:2] if output is OutputActivation.SIGMOID else grad
                grads_w, grads_b = model.backward(activations, grad_raw)
                grads = [g for pair in zip(grads_w, grads_b) for g in pair]
                for param, v, g in zip(model.parameters(), velocity, grads):
                    v *= config.momentum
                    v -= config.learning_rate * g
                    param += v

            loss, epoch_clamped = focal_loss_from_logits(model.logits(x), y, focal)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            clamped += epoch_clamped
            trace.append(loss)
            logger.debug(f"epoch {epoch}/{config.epochs} loss={loss:.6f}")

    if clamped:
        logger.warning(f"{clamped} loss evaluations hit the probability floor {PROBABILITY_FLOOR}")
    if trace:
        logger.info(f"Finished training: loss {initial_loss:.6f} -> {trace[-1]:.6f}")
    return TrainingResult(
        model=model,
        initial_loss=initial_loss,
        loss_trace=tuple(trace),
        clamped=clamped,
        class_weights=focal.class_weights,
    )


def patch_training_set(features: FeatureStore, manifest: DatasetManifest) -> Tuple[np.ndarray, np.ndarray]:
    """Stack feature vectors of every labelled patch in manifest order."""
    rows, labels = [], []
    for record in manifest.records:
        if record.patch_labels is None:
            continue
        for i, label in enumerate(record.patch_labels):
            rows.append(features.get(record.frame_id, i))
            labels.append(int(label))
    if not rows:
        raise NoLabelsError("no patch labels")
    return np.vstack(rows), np.asarray(labels, dtype=int)


def frame_training_set(features: FeatureStore, manifest: DatasetManifest) -> Tuple[np.ndarray, np.ndarray]:
    rows, labels = [], []
    for record in manifest.records:
        if record.ecologist_label is None:
            continue
        rows.append(features.get(record.frame_id))
        labels.append(record.ecologist_label.index)
    if not rows:
        raise NoLabelsError("no frame labels")
    return np.vstack(rows), np.asarray(labels, dtype=int)


def train_patch_head(
    features: FeatureStore,
    manifest: DatasetManifest,
    config: TrainConfig,
    hidden: Sequence[int] = (),
) -> TrainingResult:
    x, y = patch_training_set(features, manifest)
    return train(x, y, [x.shape[1], *hidden, NUM_PATCH_CLASSES], config, OutputActivation.SOFTMAX)


def train_frame_head(
    features: FeatureStore,
    manifest: DatasetManifest,
    config: TrainConfig,
    hidden: Sequence[int] = (),
) -> TrainingResult:
    x, y = frame_training_set(features, manifest)
    return train(x, y, [x.shape[1], *hidden, 1], config, OutputActivation.SIGMOID)


def train_aggregation_network(
    grids: Sequence[GridClassification],
    truths: FrameTruths,
    config: TrainConfig,
    hidden: int = AGGREGATION_HIDDEN,
) -> TrainingResult:
    """Fit the sigmoid network mapping a frame's patch distributions to its ecologist label."""
    if not grids:
        raise NoLabelsError("no frames to train the aggregation network on")
    if len({g.grid for g in grids}) > 1:
        raise DimensionMismatchError("frames use different grids")
    by_id = dict(truths)
    missing = [g.frame_id for g in grids if g.frame_id not in by_id]
    if missing:
        raise AlignmentError(f"{len(missing)} frames have no ecologist label: {', '.join(missing[:10])}")

    x = np.vstack([aggregation_input(g) for g in grids])
    y = np.asarray([by_id[g.frame_id].index for g in grids], dtype=int)
    return train(x, y, [x.shape[1], hidden, 1], config, OutputActivation.SIGMOID)


def write_loss_trace(path: Union[str, Path], result: TrainingResult) -> None:
    df = pd.DataFrame(
        {
            "epoch": range(len(result.loss_trace) + 1),
            "loss": [result.initial_loss, *result.loss_trace],
        }
    )
    write_frame_csv(path, df)
