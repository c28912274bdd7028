import hashlib
import logging
import math
import time
from abc import ABC
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from reefdeploy.exceptions import ClassificationError, DimensionMismatchError, NonFiniteError
from reefdeploy.models.network import MlpModel, OutputActivation, sigmoid, softmax
from reefdeploy.models.schemas import (
    NUM_PATCH_CLASSES,
    ClassDistribution,
    FrameClassification,
    FrameRecord,
    GridClassification,
    GridSpec,
    PatchFeatures,
)
from reefdeploy.storage import JsonlDecodeError, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class ClassifierBackend(ABC):
    """Source of patch (3-class) or whole-frame (2-class) probabilities.

    Backends hold read-only state after construction and may be shared by
    concurrent readers.
    """

    name = "backend"
    supports_patches = False
    supports_frames = False

    def patch_distributions(self, frame: FrameRecord, grid: GridSpec) -> np.ndarray:
        """``(rows*cols, 3)`` probabilities in row-major patch order."""
        raise ClassificationError(f"{self.name} backend has no patch output")

    def frame_deploy_prob(self, frame: FrameRecord) -> float:
        raise ClassificationError(f"{self.name} backend has no whole-frame output")


def _unit_interval(digest: bytes) -> np.ndarray:
    # 8-byte words mapped into (0, 1]
    words = np.frombuffer(digest, dtype=">u8").astype(float)
    return (words + 1.0) / 2.0**64


class MockBackend(ClassifierBackend):
    """Deterministic pseudo-classifier keyed on ``(seed, frame_id, patch_index)``.

    Each patch gets three hashed uniforms turned into exponentials and
    normalised, which is a draw from a flat Dirichlet. ``delay_ms`` simulates
    inference cost once per call.
    """

    name = "mock"
    supports_patches = True
    supports_frames = True

    def __init__(
        self,
        seed: int = 0,
        delay_ms: float = 0.0,
        constant: Optional[Sequence[float]] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.seed = int(seed)
        self.delay_ms = float(delay_ms)
        self.constant = ClassDistribution(probs=tuple(constant)).probs if constant is not None else None
        self._sleep = sleep

    def _digest(self, frame_id: str, key: str) -> bytes:
        return hashlib.blake2b(f"{self.seed}:{frame_id}:{key}".encode("utf-8"), digest_size=24).digest()

    def _simulate_cost(self) -> None:
        if self.delay_ms > 0:
            self._sleep(self.delay_ms / 1000.0)

    def distribution(self, frame_id: str, patch_index: int) -> np.ndarray:
        if self.constant is not None:
            return np.asarray(self.constant, dtype=float)
        e = -np.log(_unit_interval(self._digest(frame_id, str(patch_index))))
        return e / e.sum()

    def patch_distributions(self, frame: FrameRecord, grid: GridSpec) -> np.ndarray:
        self._simulate_cost()
        return np.array([self.distribution(frame.frame_id, i) for i in range(grid.size)])

    def frame_deploy_prob(self, frame: FrameRecord) -> float:
        self._simulate_cost()
        if self.constant is not None:
            return float(self.constant[2])
        return float(_unit_interval(self._digest(frame.frame_id, "frame"))[0])


class PredictionsFileBackend(ClassifierBackend):
    """Lookup over probabilities exported by an external model."""

    name = "predictions"

    def __init__(
        self,
        patch_probs: Optional[Dict[Tuple[str, int], Tuple[float, float, float]]] = None,
        frame_probs: Optional[Dict[str, float]] = None,
    ):
        self.patch_probs = dict(patch_probs or {})
        self.frame_probs = dict(frame_probs or {})
        self.supports_patches = bool(self.patch_probs)
        self.supports_frames = bool(self.frame_probs)

    @classmethod
    def from_file(cls, path: PathLike) -> "PredictionsFileBackend":
        patch_probs: Dict[Tuple[str, int], Tuple[float, float, float]] = {}
        frame_probs: Dict[str, float] = {}
        try:
            for line_no, obj in read_jsonl(path):
                try:
                    frame_id = str(obj["frame_id"])
                    if "probs" in obj:
                        key = (frame_id, int(obj["patch_index"]))
                        if key in patch_probs:
                            raise ValueError(f"duplicate entry for patch {key[1]}")
                        patch_probs[key] = ClassDistribution(probs=tuple(obj["probs"])).probs
                    elif "deploy_prob" in obj:
                        if frame_id in frame_probs:
                            raise ValueError("duplicate frame entry")
                        frame_probs[frame_id] = FrameClassification(
                            frame_id=frame_id, deploy_prob=obj["deploy_prob"]
                        ).deploy_prob
                    else:
                        raise ValueError("entry has neither probs nor deploy_prob")
                except (KeyError, TypeError, ValueError) as e:
                    raise ClassificationError(f"{path} line {line_no}: {e}") from e
        except JsonlDecodeError as e:
            raise ClassificationError(f"{path}: {e}") from e
        logger.info(f"Loaded predictions {path}: {len(patch_probs)} patch entries, {len(frame_probs)} frame entries")
        return cls(patch_probs, frame_probs)

    def frame_ids(self) -> List[str]:
        """Frame ids in first-seen file order."""
        seen = dict.fromkeys(frame_id for frame_id, _ in self.patch_probs)
        seen.update(dict.fromkeys(self.frame_probs))
        return list(seen)

    def patch_distributions(self, frame: FrameRecord, grid: GridSpec) -> np.ndarray:
        rows = []
        for i in range(grid.size):
            probs = self.patch_probs.get((frame.frame_id, i))
            if probs is None:
                raise ClassificationError(f"no prediction for frame {frame.frame_id!r} patch {i}")
            rows.append(probs)
        return np.array(rows, dtype=float)

    def frame_deploy_prob(self, frame: FrameRecord) -> float:
        if frame.frame_id not in self.frame_probs:
            raise ClassificationError(f"no prediction for frame {frame.frame_id!r}")
        return self.frame_probs[frame.frame_id]


class FeatureStore:
    """Feature vectors keyed by ``(frame_id, patch_index)``; frame-level vectors use ``None``."""

    def __init__(self, vectors: Dict[Tuple[str, Optional[int]], np.ndarray]):
        dims = {v.shape[0] for v in vectors.values()}
        if len(dims) > 1:
            raise DimensionMismatchError(f"feature vectors have mixed dimensionality {sorted(dims)}")
        self.vectors = vectors
        self.dim = dims.pop() if dims else 0

    @classmethod
    def from_records(cls, features: Iterable[PatchFeatures]) -> "FeatureStore":
        return cls({(f.frame_id, f.patch_index): f.as_array() for f in features})

    @classmethod
    def from_file(cls, path: PathLike) -> "FeatureStore":
        vectors: Dict[Tuple[str, Optional[int]], np.ndarray] = {}
        dim = None
        try:
            for line_no, obj in read_jsonl(path):
                try:
                    features = PatchFeatures.model_validate(obj)
                except ValidationError as e:
                    raise ClassificationError(f"{path} line {line_no}: {e.errors()[0]['msg']}") from e
                values = features.as_array()
                if dim is None:
                    dim = values.shape[0]
                elif values.shape[0] != dim:
                    raise DimensionMismatchError(
                        f"{path} line {line_no}: {values.shape[0]} feature values, earlier lines have {dim}"
                    )
                vectors[(features.frame_id, features.patch_index)] = values
        except JsonlDecodeError as e:
            raise ClassificationError(f"{path}: {e}") from e
        logger.info(f"Loaded {len(vectors)} feature vectors of dimension {dim or 0} from {path}")
        return cls(vectors)

    def records(self) -> List[PatchFeatures]:
        return [
            PatchFeatures(frame_id=frame_id, patch_index=index, values=tuple(float(x) for x in values))
            for (frame_id, index), values in self.vectors.items()
        ]

    def get(self, frame_id: str, patch_index: Optional[int] = None) -> np.ndarray:
        try:
            return self.vectors[(frame_id, patch_index)]
        except KeyError:
            where = f" patch {patch_index}" if patch_index is not None else ""
            raise ClassificationError(f"no features for frame {frame_id!r}{where}") from None

    def patch_matrix(self, frame_id: str, grid: GridSpec) -> np.ndarray:
        return np.vstack([self.get(frame_id, i) for i in range(grid.size)])


def softmax_forward(model: MlpModel, features: Sequence[float]) -> ClassDistribution:
    x = np.asarray(features, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatchError(f"expected a single feature vector, got shape {x.shape}")
    return ClassDistribution(probs=tuple(float(p) for p in _softmax_rows(model, x)[0]))


def _softmax_rows(model: MlpModel, x: np.ndarray) -> np.ndarray:
    if model.output is not OutputActivation.SOFTMAX or model.output_dim != NUM_PATCH_CLASSES:
        raise DimensionMismatchError(
            f"patch head must be a {NUM_PATCH_CLASSES}-way softmax, got {model.output.value} with {model.output_dim} outputs"
        )
    logits = model.logits(x)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("patch head produced non-finite logits")
    return softmax(logits)


class NativeHeadBackend(ClassifierBackend):
    """Linear or MLP heads evaluated in-process over stored feature vectors."""

    name = "native"

    def __init__(
        self,
        features: FeatureStore,
        patch_model: Optional[MlpModel] = None,
        frame_model: Optional[MlpModel] = None,
    ):
        self.features = features
        self.patch_model = patch_model
        self.frame_model = frame_model
        self.supports_patches = patch_model is not None
        self.supports_frames = frame_model is not None
        if frame_model is not None and frame_model.num_classes != 2:
            raise DimensionMismatchError(f"frame head must have 2 classes, got {frame_model.num_classes}")

    def patch_distributions(self, frame: FrameRecord, grid: GridSpec) -> np.ndarray:
        if self.patch_model is None:
            return super().patch_distributions(frame, grid)
        return _softmax_rows(self.patch_model, self.features.patch_matrix(frame.frame_id, grid))

    def frame_deploy_prob(self, frame: FrameRecord) -> float:
        if self.frame_model is None:
            return super().frame_deploy_prob(frame)
        raw, _ = self.frame_model.forward(self.features.get(frame.frame_id))
        if not np.all(np.isfinite(raw)):
            raise NonFiniteError(f"frame head produced non-finite output for {frame.frame_id!r}")
        if self.frame_model.output is OutputActivation.SIGMOID:
            return float(sigmoid(raw[:, 0])[0])
        return float(softmax(raw)[0, 1])


def classify_patches(backend: ClassifierBackend, frame: FrameRecord, grid: GridSpec) -> GridClassification:
    if not backend.supports_patches:
        raise ClassificationError(f"{backend.name} backend has no patch output")
    probs = backend.patch_distributions(frame, grid)
    if probs.shape != (grid.size, NUM_PATCH_CLASSES):
        raise DimensionMismatchError(
            f"frame {frame.frame_id!r}: backend returned {probs.shape}, grid {grid} needs {(grid.size, NUM_PATCH_CLASSES)}"
        )
    try:
        return GridClassification.from_probabilities(frame.frame_id, grid, probs)
    except ValidationError as e:
        raise NonFiniteError(f"frame {frame.frame_id!r}: invalid distribution ({e.errors()[0]['msg']})") from e


def classify_frame(backend: ClassifierBackend, frame: FrameRecord) -> FrameClassification:
    if not backend.supports_frames:
        raise ClassificationError(f"{backend.name} backend has no whole-frame output")
    deploy_prob = backend.frame_deploy_prob(frame)
    if not math.isfinite(deploy_prob):
        raise NonFiniteError(f"frame {frame.frame_id!r}: non-finite deploy probability")
    return FrameClassification(frame_id=frame.frame_id, deploy_prob=deploy_prob)


def write_predictions(path: PathLike, items: Iterable[Union[GridClassification, FrameClassification]]) -> int:
    """Write classifications in the predictions-file format; returns the number of lines."""

    def lines():
        for item in items:
            if isinstance(item, GridClassification):
                for i, dist in enumerate(item.distributions):
                    yield {"frame_id": item.frame_id, "patch_index": i, "probs": list(dist.probs)}
            else:
                yield {"frame_id": item.frame_id, "deploy_prob": item.deploy_prob}

    count = write_jsonl(path, lines())
    logger.info(f"Wrote {count} prediction lines to {path}")
    return count


def load_predictions(path: PathLike) -> PredictionsFileBackend:
    return PredictionsFileBackend.from_file(path)
