from reefdeploy._compat import StrEnum
from typing import Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, model_validator

from reefdeploy.models.schemas import FrameDecision, FrameLabel, GeoPoint, PatchClass


class ConfusionMatrix(BaseModel):
    """Entry ``counts[t][p]`` counts samples of true class t predicted as p."""

    model_config = ConfigDict(frozen=True)

    counts: Tuple[Tuple[NonNegativeInt, ...], ...]
    labels: Tuple[str, ...]

    @model_validator(mode="after")
    def validate_square(self):
        n = len(self.labels)
        if len(self.counts) != n or any(len(row) != n for row in self.counts):
            raise ValueError(f"confusion matrix must be {n}x{n}")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    @property
    def total(self) -> int:
        return int(self.as_array().sum())

    def as_array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64).reshape(self.num_classes, self.num_classes)


class ClassMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: str
    precision: float = Field(ge=0.0, le=100.0)
    recall: float = Field(ge=0.0, le=100.0)
    f1: float = Field(ge=0.0, le=100.0)
    support: NonNegativeInt


class MetricsReport(BaseModel):
    """Percentages, unrounded; rounding happens when rendered."""

    model_config = ConfigDict(frozen=True)

    per_class: Tuple[ClassMetrics, ...]
    macro_f1: float = Field(ge=0.0, le=100.0)
    accuracy: float = Field(ge=0.0, le=100.0)

    def for_label(self, label: str) -> ClassMetrics:
        for metrics in self.per_class:
            if metrics.label == label:
                return metrics
        raise KeyError(label)


class DeployMetrics(BaseModel):
    model_config = ConfigDict(frozen=True)

    deploy_precision: float
    deploy_recall: float
    accuracy: float
    f1: float


class AgreementReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    report: MetricsReport
    flags: Tuple[bool, ...]
    frame_ids: Tuple[str, ...]

    @property
    def accuracy(self) -> float:
        return self.report.accuracy


class PrPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float
    deploy_precision: float
    deploy_recall: float
    overall_f1: float
    accuracy: float
    deploy_count: NonNegativeInt


class PrCurve(BaseModel):
    model_config = ConfigDict(frozen=True)

    rule: str
    points: Tuple[PrPoint, ...]

    @model_validator(mode="after")
    def validate_monotone(self):
        alphas = [p.alpha for p in self.points]
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise ValueError("alphas must be strictly increasing")
        counts = [p.deploy_count for p in self.points]
        if any(b > a for a, b in zip(counts, counts[1:])):
            raise ValueError("deploy decisions must not increase with alpha")
        return self


class PseudoLabelSource(StrEnum):
    CHAT_VLM = "chat_vlm"
    EMBEDDING_SIMILARITY = "embedding_similarity"


class PseudoLabel(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame_id: str
    patch_index: int = Field(ge=0)
    patch_class: PatchClass
    confidence: float = Field(ge=0.0, le=1.0)
    source: PseudoLabelSource
    raw_response: Optional[str] = None

    def to_json(self) -> dict:
        line = {
            "frame_id": self.frame_id,
            "patch_index": self.patch_index,
            "class": int(self.patch_class),
            "conf": self.confidence,
            "source": self.source.value,
        }
        if self.raw_response is not None:
            line["raw_response"] = self.raw_response
        return line


class LabelReject(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame_id: str
    patch_index: int
    reason: str
    attempts: int = 0
    detail: Optional[str] = None
    raw_response: Optional[str] = None


class LabelingResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    labels: Tuple[PseudoLabel, ...] = ()
    rejects: Tuple[LabelReject, ...] = ()


class TrackEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    geo: GeoPoint
    decision: FrameDecision
    timestamp_ms: Optional[int] = None
    ecologist_label: Optional[FrameLabel] = None
    agree: Optional[bool] = None


class GeoTrack(BaseModel):
    model_config = ConfigDict(frozen=True)

    entries: Tuple[TrackEntry, ...] = ()

    @model_validator(mode="after")
    def validate_timestamps(self):
        stamps = [e.timestamp_ms for e in self.entries if e.timestamp_ms is not None]
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("track timestamps must be non-decreasing")
        return self

    def __len__(self) -> int:
        return len(self.entries)


class TimingStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    frames_offered: NonNegativeInt = 0
    frames_processed: NonNegativeInt = 0
    frames_dropped: NonNegativeInt = 0
    elapsed_s: float = Field(default=0.0, ge=0.0)
    latency_ms: Tuple[float, ...] = ()
    inference_ms: Tuple[float, ...] = ()

    @model_validator(mode="after")
    def validate_conservation(self):
        if self.frames_offered != self.frames_processed + self.frames_dropped:
            raise ValueError(
                f"offered {self.frames_offered} != processed {self.frames_processed} + dropped {self.frames_dropped}"
            )
        return self

    @property
    def achieved_fps(self) -> float:
        return self.frames_processed / self.elapsed_s if self.elapsed_s > 0 else 0.0

    @staticmethod
    def _percentile(samples: Sequence[float], q: float) -> float:
        return float(np.percentile(samples, q)) if len(samples) else 0.0

    @property
    def p50_latency_ms(self) -> float:
        return self._percentile(self.latency_ms, 50)

    @property
    def p95_latency_ms(self) -> float:
        return self._percentile(self.latency_ms, 95)

    @property
    def max_latency_ms(self) -> float:
        return max(self.latency_ms) if self.latency_ms else 0.0

    @property
    def p50_inference_ms(self) -> float:
        return self._percentile(self.inference_ms, 50)

