import json
import logging
from reefdeploy._compat import StrEnum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from reefdeploy.exceptions import CheckpointDimensionError, CheckpointSchemaError, DimensionMismatchError, NonFiniteError
from reefdeploy.storage import atomic_write_text

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1


class OutputActivation(StrEnum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def sigmoid(z: Union[np.ndarray, float]) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class MlpModel:
    """Dense network: ReLU hidden layers, softmax or single-sigmoid output.

    Weight matrices are stored ``(fan_in, fan_out)`` so a batch ``x`` of shape
    ``(n, fan_in)`` maps to ``x @ w + b``.
    """

    def __init__(
        self,
        layer_dims: Sequence[int],
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        output: OutputActivation,
        seed: int = 0,
        train_config: Optional[Dict[str, Any]] = None,
    ):
        self.layer_dims = [int(d) for d in layer_dims]
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.output = OutputActivation(output)
        self.seed = int(seed)
        self.train_config = dict(train_config or {})
        self._validate()

    def _validate(self) -> None:
        dims = self.layer_dims
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise DimensionMismatchError(f"layer dims must be >= 2 positive integers, got {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise DimensionMismatchError(f"{len(dims) - 1} layers expected for arch {dims}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]):
                raise DimensionMismatchError(f"layer {i} weight shape {w.shape}, arch needs {(dims[i], dims[i + 1])}")
            if b.shape != (dims[i + 1],):
                raise DimensionMismatchError(f"layer {i} bias shape {b.shape}, arch needs {(dims[i + 1],)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NonFiniteError(f"layer {i} has non-finite parameters")
        if self.output is OutputActivation.SIGMOID and dims[-1] != 1:
            raise DimensionMismatchError(f"sigmoid output needs 1 unit, arch ends with {dims[-1]}")
        if self.output is OutputActivation.SOFTMAX and dims[-1] < 2:
            raise DimensionMismatchError("softmax output needs at least 2 units")

    @classmethod
    def initialize(
        cls,
        layer_dims: Sequence[int],
        output: OutputActivation,
        seed: int = 0,
        rng: Optional[np.random.Generator] = None,
    ) -> "MlpModel":
        """Glorot-uniform weights from a seeded generator, zero biases."""
        rng = rng if rng is not None else np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(layer_dims, weights, biases, output, seed=seed)

    @classmethod
    def zeros(cls, layer_dims: Sequence[int], output: OutputActivation) -> "MlpModel":
        weights = [np.zeros((a, b)) for a, b in zip(layer_dims[:-1], layer_dims[1:])]
        biases = [np.zeros(b) for b in layer_dims[1:]]
        return cls(layer_dims, weights, biases, output)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_classes(self) -> int:
        return 2 if self.output is OutputActivation.SIGMOID else self.output_dim

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.input_dim:
            raise DimensionMismatchError(f"model expects {self.input_dim} inputs, got {x.shape[1]}")
        return x

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        """Raw output-layer values and the activations fed into each layer."""
        a = self._check_input(x)
        activations = [a]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            if i < len(self.weights) - 1:
                a = np.maximum(z, 0.0)
                activations.append(a)
            else:
                a = z
        return a, activations

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Class logits; a sigmoid unit z is expressed as the pair [0, z]."""
        raw, _ = self.forward(x)
        return self.raw_to_logits(raw)

    def raw_to_logits(self, raw: np.ndarray) -> np.ndarray:
        if self.output is OutputActivation.SIGMOID:
            return np.column_stack([np.zeros(raw.shape[0]), raw[:, 0]])
        return raw

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        raw, _ = self.forward(x)
        if not np.all(np.isfinite(raw)):
            raise NonFiniteError("network produced non-finite outputs")
        if self.output is OutputActivation.SIGMOID:
            return sigmoid(raw[:, 0])
        return softmax(raw)

    def backward(self, activations: List[np.ndarray], grad_raw: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        grads_w: List[np.ndarray] = [np.empty(0)] * len(self.weights)
        grads_b: List[np.ndarray] = [np.empty(0)] * len(self.biases)
        delta = grad_raw
        for i in reversed(range(len(self.weights))):
            grads_w[i] = activations[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (activations[i] > 0.0)
        return grads_w, grads_b

    def parameters(self) -> List[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.output,
            seed=self.seed,
            train_config=self.train_config,
        )


class LayerParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    w: List[List[float]]
    b: List[float]


class CheckpointFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    arch: List[int]
    output: OutputActivation
    layers: List[LayerParams]
    seed: int = 0
    train_config: Dict[str, Any] = {}


def model_to_json(model: MlpModel) -> Dict[str, Any]:
    return {
        "schema": CHECKPOINT_SCHEMA,
        "arch": model.layer_dims,
        "output": model.output.value,
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(model.weights, model.biases)],
        "seed": model.seed,
        "train_config": model.train_config,
    }


def save_model(model: MlpModel, path: Union[str, Path]) -> None:
    # float repr is the shortest decimal that parses back to the same bits
    atomic_write_text(path, json.dumps(model_to_json(model)) + "\n")
    logger.info(f"Saved {model.output.value} model {model.layer_dims} to {path}")


def load_model(path: Union[str, Path]) -> MlpModel:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointSchemaError(f"{path}: not a valid checkpoint ({e})") from e
    if not isinstance(raw, dict) or "schema" not in raw:
        raise CheckpointSchemaError(f"{path}: missing schema field")
    if raw["schema"] != CHECKPOINT_SCHEMA:
        raise CheckpointSchemaError(f"{path}: schema {raw['schema']!r}, expected {CHECKPOINT_SCHEMA}")
    raw = dict(raw)
    raw["schema_version"] = raw.pop("schema")
    try:
        ckpt = CheckpointFile.model_validate(raw)
    except ValidationError as e:
        raise CheckpointSchemaError(f"{path}: {e.errors()[0]['msg']} at {e.errors()[0]['loc']}") from e

    arch = ckpt.arch
    if len(ckpt.layers) != len(arch) - 1:
        raise CheckpointDimensionError(f"{path}: {len(ckpt.layers)} layers for arch {arch}")
    weights, biases = [], []
    for i, layer in enumerate(ckpt.layers):
        try:
            w = np.asarray(layer.w, dtype=float)
            b = np.asarray(layer.b, dtype=float)
        except ValueError as e:
            raise CheckpointDimensionError(f"{path}: layer {i} is ragged ({e})") from e
        if w.ndim != 2 or w.shape != (arch[i], arch[i + 1]) or b.shape != (arch[i + 1],):
            raise CheckpointDimensionError(
                f"{path}: layer {i} has w{w.shape} b{b.shape}, arch {arch} needs w{(arch[i], arch[i + 1])}"
            )
        weights.append(w)
        biases.append(b)
    try:
        return MlpModel(arch, weights, biases, ckpt.output, seed=ckpt.seed, train_config=ckpt.train_config)
    except DimensionMismatchError as e:
        raise CheckpointDimensionError(f"{path}: {e}") from e
