import math
import re
from enum import IntEnum
from reefdeploy._compat import StrEnum
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, field_validator, model_validator

PROB_TOLERANCE = 1e-6


class PatchClass(IntEnum):
    """Patch vocabulary. Codes follow the labelling prompt: 0 other, 1 coral, 2 rock."""

    NO_DEPLOY = 0
    CORAL = 1
    DEPLOY = 2

    @property
    def slug(self) -> str:
        return self.name.lower()


NUM_PATCH_CLASSES = len(PatchClass)


class FrameLabel(StrEnum):
    NO_DEPLOY = "no_deploy"
    DEPLOY = "deploy"

    @property
    def index(self) -> int:
        # binary class axis used by metrics and the aggregation network: 0 no_deploy, 1 deploy
        return 1 if self is FrameLabel.DEPLOY else 0

    @classmethod
    def from_index(cls, index: int) -> "FrameLabel":
        return cls.DEPLOY if int(index) == 1 else cls.NO_DEPLOY


class DecisionRule(StrEnum):
    THRESHOLDING_WITH_PATCHES = "thresholding_with_patches"
    SPATIAL_PATCH_AGGREGATION = "spatial_patch_aggregation"
    WHOLE_IMAGE = "whole_image"

    @property
    def uses_patches(self) -> bool:
        return self is not DecisionRule.WHOLE_IMAGE


class RatioConvention(StrEnum):
    DEPLOY_VS_REST = "deploy_vs_rest"
    DEPLOY_OF_TOTAL = "deploy_of_total"


class ClassDistribution(BaseModel):
    """Probability mass over [No-Deploy, Coral, Deploy]."""

    model_config = ConfigDict(frozen=True)

    probs: Tuple[float, float, float]

    @field_validator("probs")
    @classmethod
    def validate_probs(cls, v):
        if not all(math.isfinite(p) for p in v):
            raise ValueError(f"probabilities must be finite, got {v}")
        if any(p < 0.0 or p > 1.0 for p in v):
            raise ValueError(f"probabilities must lie in [0, 1], got {v}")
        if abs(sum(v) - 1.0) > PROB_TOLERANCE:
            raise ValueError(f"probabilities must sum to 1 (got {sum(v)!r})")
        return v

    @classmethod
    def from_logits(cls, logits: Sequence[float]) -> "ClassDistribution":
        z = np.asarray(logits, dtype=float)
        if z.shape != (NUM_PATCH_CLASSES,):
            raise ValueError(f"expected {NUM_PATCH_CLASSES} logits, got shape {z.shape}")
        e = np.exp(z - z.max())
        return cls(probs=tuple(float(p) for p in e / e.sum()))

    @property
    def argmax(self) -> PatchClass:
        # np.argmax returns the first maximum, so ties resolve to the lowest code
        return PatchClass(int(np.argmax(self.probs)))

    def __getitem__(self, patch_class: int) -> float:
        return self.probs[int(patch_class)]


class GridSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    rows: PositiveInt = 4
    cols: PositiveInt = 7

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """Parse ``ROWSxCOLS`` (e.g. ``4x7``)."""
        match = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
        if not match:
            raise ValueError(f"grid must look like ROWSxCOLS, got {text!r}")
        return cls(rows=int(match.group(1)), cols=int(match.group(2)))

    def __str__(self) -> str:
        return f"{self.rows}x{self.cols}"


class GeoPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    lat: float = Field(ge=-90.0, le=90.0)
    lon: float = Field(ge=-180.0, le=180.0)
    depth_m: Optional[float] = Field(default=None, ge=0.0)


class FrameRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame_id: str = Field(min_length=1)
    source: str = ""
    timestamp_ms: Optional[int] = None
    geo: Optional[GeoPoint] = None
    ecologist_label: Optional[FrameLabel] = None
    patch_labels: Optional[Tuple[PatchClass, ...]] = None

    @classmethod
    def from_manifest_json(cls, obj: Dict[str, Any]) -> "FrameRecord":
        if not isinstance(obj, dict):
            raise ValueError("record must be a JSON object")
        known = {"frame_id", "source", "timestamp_ms", "lat", "lon", "depth_m", "ecologist_label", "patch_labels"}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown fields: {sorted(unknown)}")
        geo = None
        if obj.get("lat") is None and obj.get("lon") is None:
            if obj.get("depth_m") is not None:
                raise ValueError("depth_m given without lat/lon")
        else:
            geo = GeoPoint(lat=obj.get("lat"), lon=obj.get("lon"), depth_m=obj.get("depth_m"))
        return cls(
            frame_id=obj.get("frame_id"),
            source=obj.get("source", ""),
            timestamp_ms=obj.get("timestamp_ms"),
            geo=geo,
            ecologist_label=obj.get("ecologist_label"),
            patch_labels=obj.get("patch_labels"),
        )

    def to_manifest_json(self) -> Dict[str, Any]:
        line: Dict[str, Any] = {"frame_id": self.frame_id, "source": self.source}
        if self.timestamp_ms is not None:
            line["timestamp_ms"] = self.timestamp_ms
        if self.geo is not None:
            line["lat"] = self.geo.lat
            line["lon"] = self.geo.lon
            if self.geo.depth_m is not None:
                line["depth_m"] = self.geo.depth_m
        if self.ecologist_label is not None:
            line["ecologist_label"] = self.ecologist_label.value
        if self.patch_labels is not None:
            line["patch_labels"] = [int(c) for c in self.patch_labels]
        return line


class DatasetManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    grid: GridSpec = GridSpec()
    records: Tuple[FrameRecord, ...] = ()

    @model_validator(mode="after")
    def validate_records(self):
        seen = set()
        for record in self.records:
            if record.frame_id in seen:
                raise ValueError(f"duplicate frame_id {record.frame_id!r}")
            seen.add(record.frame_id)
            if record.patch_labels is not None and len(record.patch_labels) != self.grid.size:
                raise ValueError(
                    f"frame {record.frame_id!r} has {len(record.patch_labels)} patch labels, "
                    f"grid {self.grid} needs {self.grid.size}"
                )
        return self

    @cached_property
    def by_id(self) -> Dict[str, FrameRecord]:
        return {record.frame_id: record for record in self.records}

    @property
    def patch_class_counts(self) -> Dict[PatchClass, int]:
        counts = {c: 0 for c in PatchClass}
        for record in self.records:
            for label in record.patch_labels or ():
                counts[label] += 1
        return counts

    @property
    def frame_class_counts(self) -> Dict[FrameLabel, int]:
        counts = {label: 0 for label in FrameLabel}
        for record in self.records:
            if record.ecologist_label is not None:
                counts[record.ecologist_label] += 1
        return counts


class PatchRect(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: int = Field(ge=0)
    y: int = Field(ge=0)
    w: PositiveInt
    h: PositiveInt
    index: int = Field(ge=0)

    @property
    def box(self) -> Tuple[int, int, int, int]:
        """(left, upper, right, lower), the crop box Pillow expects."""
        return (self.x, self.y, self.x + self.w, self.y + self.h)


class PatchFeatures(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    frame_id: str
    patch_index: Optional[int] = None
    values: Tuple[float, ...]

    @field_validator("values")
    @classmethod
    def validate_values(cls, v):
        if not v:
            raise ValueError("feature vector is empty")
        if not all(math.isfinite(x) for x in v):
            raise ValueError("feature values must be finite")
        return v

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


class GridClassification(BaseModel):
    """Per-patch distributions of one frame, row-major, plus their argmax classes."""

    model_config = ConfigDict(frozen=True)

    frame_id: str
    grid: GridSpec
    distributions: Tuple[ClassDistribution, ...]
    predicted: Tuple[PatchClass, ...]

    @model_validator(mode="after")
    def validate_grid(self):
        if len(self.distributions) != self.grid.size:
            raise ValueError(
                f"frame {self.frame_id!r}: {len(self.distributions)} distributions for grid {self.grid}"
            )
        if tuple(d.argmax for d in self.distributions) != tuple(self.predicted):
            raise ValueError(f"frame {self.frame_id!r}: predicted classes disagree with distributions")
        return self

    @classmethod
    def from_probabilities(cls, frame_id: str, grid: GridSpec, probs: Any) -> "GridClassification":
        distributions = tuple(ClassDistribution(probs=tuple(float(p) for p in row)) for row in np.asarray(probs))
        return cls(
            frame_id=frame_id,
            grid=grid,
            distributions=distributions,
            predicted=tuple(d.argmax for d in distributions),
        )

    def probabilities(self) -> np.ndarray:
        return np.array([d.probs for d in self.distributions], dtype=float)

    def segmentation(self) -> np.ndarray:
        """Coarse segmentation: rows x cols array of predicted class codes."""
        return np.array([int(c) for c in self.predicted], dtype=int).reshape(self.grid.rows, self.grid.cols)

    def count(self, patch_class: PatchClass) -> int:
        return sum(1 for c in self.predicted if c == patch_class)

    @property
    def coral_cover(self) -> float:
        return self.count(PatchClass.CORAL) / self.grid.size


class FrameClassification(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame_id: str
    deploy_prob: float = Field(ge=0.0, le=1.0)

    @property
    def no_deploy_prob(self) -> float:
        return 1.0 - self.deploy_prob


class FrameDecision(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame_id: str
    decision: FrameLabel
    score: float
    alpha: float = Field(ge=0.0, le=1.0)
    rule: DecisionRule

    @model_validator(mode="after")
    def validate_boundary(self):
        if (self.decision is FrameLabel.DEPLOY) != (self.score >= self.alpha):
            raise ValueError(
                f"frame {self.frame_id!r}: decision {self.decision} inconsistent with score {self.score} / alpha {self.alpha}"
            )
        return self

    def to_log_json(self, record: Optional[FrameRecord] = None) -> Dict[str, Any]:
        line: Dict[str, Any] = {
            "frame_id": self.frame_id,
            "decision": self.decision.value,
            "score": self.score,
            "alpha": self.alpha,
            "rule": self.rule.value,
        }
        if record is not None:
            if record.geo is not None:
                line["lat"] = record.geo.lat
                line["lon"] = record.geo.lon
            if record.timestamp_ms is not None:
                line["timestamp_ms"] = record.timestamp_ms
        return line

    @classmethod
    def from_log_json(cls, obj: Dict[str, Any]) -> "FrameDecision":
        return cls(
            frame_id=obj["frame_id"],
            decision=obj["decision"],
            score=obj["score"],
            alpha=obj["alpha"],
            rule=obj["rule"],
        )


FrameTruths = List[Tuple[str, FrameLabel]]
