from reefdeploy._compat import StrEnum
from typing import Any, Dict, Optional, Tuple

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    field_validator,
    model_validator,
)

from reefdeploy.models.network import MlpModel
from reefdeploy.models.schemas import DecisionRule, RatioConvention

# Operating points reported for the field system.
DEFAULT_ALPHAS: Dict[DecisionRule, float] = {
    DecisionRule.THRESHOLDING_WITH_PATCHES: 0.4,
    DecisionRule.SPATIAL_PATCH_AGGREGATION: 0.3,
    DecisionRule.WHOLE_IMAGE: 0.5,
}


class DecisionConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    rule: DecisionRule = DecisionRule.THRESHOLDING_WITH_PATCHES
    alpha: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    aggregation_model: Optional[MlpModel] = None
    ratio_convention: RatioConvention = RatioConvention.DEPLOY_VS_REST

    @model_validator(mode="after")
    def validate_model_presence(self):
        needs_model = self.rule is DecisionRule.SPATIAL_PATCH_AGGREGATION
        if needs_model and self.aggregation_model is None:
            raise ValueError("spatial_patch_aggregation needs an aggregation model")
        if not needs_model and self.aggregation_model is not None:
            raise ValueError(f"rule {self.rule.value} takes no aggregation model")
        return self

    @property
    def effective_alpha(self) -> float:
        return DEFAULT_ALPHAS[self.rule] if self.alpha is None else self.alpha


class ClassWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    weights: Tuple[float, ...]

    @field_validator("weights")
    @classmethod
    def validate_positive(cls, v):
        if not v or any(not (w > 0.0) for w in v):
            raise ValueError(f"class weights must be positive, got {v}")
        return v

    def __len__(self) -> int:
        return len(self.weights)


class FocalLossConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma: float = Field(default=2.0, ge=0.0)
    # None means every class weighs 1
    class_weights: Optional[ClassWeights] = None


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: NonNegativeInt = 50
    batch_size: PositiveInt = 32
    learning_rate: float = Field(default=0.01, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    seed: int = 0
    oversample: bool = True
    class_weighting: bool = True
    focal: FocalLossConfig = FocalLossConfig()

    def describe(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


class VlmProvider(StrEnum):
    HTTP = "http"
    BEDROCK = "bedrock"


class VlmClientConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    provider: VlmProvider = VlmProvider.HTTP
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o"
    credential: str = "OPENAI_API_KEY"
    max_in_flight: PositiveInt = 4
    retries: NonNegativeInt = 2
    backoff_ms: PositiveInt = 500
    confidence_floor: float = Field(default=0.0, ge=0.0, le=1.0)
    timeout_s: PositiveFloat = 60.0


class DropPolicy(StrEnum):
    LATEST_WINS = "latest_wins"
    PROCESS_ALL = "process_all"


class StreamConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    capture_fps: PositiveFloat = 5.5
    drop_policy: DropPolicy = DropPolicy.LATEST_WINS
    queue_capacity: PositiveInt = 8
    max_frames: Optional[PositiveInt] = None
    duration_s: Optional[PositiveFloat] = None
