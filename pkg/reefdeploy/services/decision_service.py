import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from reefdeploy.exceptions import DecisionError, DimensionMismatchError, ReefDeployError
from reefdeploy.models.configs import DecisionConfig
from reefdeploy.models.network import MlpModel, OutputActivation
from reefdeploy.models.schemas import (
    DatasetManifest,
    DecisionRule,
    FrameClassification,
    FrameDecision,
    FrameLabel,
    GridClassification,
    PatchClass,
    RatioConvention,
)
from reefdeploy.storage import JsonlDecodeError, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

WHOLE_IMAGE_ALPHA = 0.5
SATURATED_SCORE = 1.0


def make_decision(frame_id: str, score: float, alpha: float, rule: DecisionRule) -> FrameDecision:
    label = FrameLabel.DEPLOY if score >= alpha else FrameLabel.NO_DEPLOY
    return FrameDecision(frame_id=frame_id, decision=label, score=score, alpha=alpha, rule=rule)


def _check_alpha(alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise DecisionError(f"alpha must lie in [0, 1], got {alpha}")
    return float(alpha)


def deploy_ratio(gc: GridClassification, convention: RatioConvention = RatioConvention.DEPLOY_VS_REST) -> float:
    n_deploy = gc.count(PatchClass.DEPLOY)
    if convention is RatioConvention.DEPLOY_OF_TOTAL:
        return n_deploy / gc.grid.size
    n_other = gc.grid.size - n_deploy
    if n_other == 0:
        # every patch is Deploy; the ratio is unbounded and reported as the saturated score
        return SATURATED_SCORE
    return n_deploy / n_other


def threshold_decision(
    gc: GridClassification,
    alpha: float,
    convention: RatioConvention = RatioConvention.DEPLOY_VS_REST,
) -> FrameDecision:
    """Deploy when the ratio of Deploy patches to the rest reaches ``alpha``."""
    alpha = _check_alpha(alpha)
    if gc.grid.size == 0:
        raise DecisionError("empty grid", frame_id=gc.frame_id)
    score = deploy_ratio(gc, convention)
    decision = make_decision(gc.frame_id, score, alpha, DecisionRule.THRESHOLDING_WITH_PATCHES)
    logger.debug(f"{gc.frame_id}: ratio={score:.4f} alpha={alpha} -> {decision.decision}")
    return decision


def aggregation_input(gc: GridClassification) -> np.ndarray:
    """Row-major concatenation of the patch distributions, ``rows*cols*3`` values."""
    return gc.probabilities().reshape(-1)


def _check_aggregation_model(model: MlpModel, input_dim: int) -> None:
    if model.output is not OutputActivation.SIGMOID:
        raise DimensionMismatchError(f"aggregation model must end in a sigmoid unit, got {model.output.value}")
    if model.input_dim != input_dim:
        raise DimensionMismatchError(f"aggregation model takes {model.input_dim} inputs, grid provides {input_dim}")


def aggregation_decision(gc: GridClassification, model: MlpModel, alpha: float) -> FrameDecision:
    alpha = _check_alpha(alpha)
    x = aggregation_input(gc)
    _check_aggregation_model(model, x.shape[0])
    score = float(model.predict_proba(x)[0])
    decision = make_decision(gc.frame_id, score, alpha, DecisionRule.SPATIAL_PATCH_AGGREGATION)
    logger.debug(f"{gc.frame_id}: s={score:.6f} alpha={alpha} -> {decision.decision}")
    return decision


def whole_image_decision(fc: FrameClassification, alpha: float = WHOLE_IMAGE_ALPHA) -> FrameDecision:
    return make_decision(fc.frame_id, fc.deploy_prob, _check_alpha(alpha), DecisionRule.WHOLE_IMAGE)


def decide(item: Union[GridClassification, FrameClassification], config: DecisionConfig) -> FrameDecision:
    rule = config.rule
    if rule is DecisionRule.WHOLE_IMAGE:
        if not isinstance(item, FrameClassification):
            raise DecisionError("whole_image rule needs a frame classification", frame_id=item.frame_id)
        return whole_image_decision(item, config.effective_alpha)
    if not isinstance(item, GridClassification):
        raise DecisionError(f"{rule.value} rule needs a patch grid classification", frame_id=item.frame_id)
    if rule is DecisionRule.THRESHOLDING_WITH_PATCHES:
        return threshold_decision(item, config.effective_alpha, config.ratio_convention)
    return aggregation_decision(item, config.aggregation_model, config.effective_alpha)


def decide_batch(
    frames: Sequence[Union[GridClassification, FrameClassification]],
    config: DecisionConfig,
) -> List[FrameDecision]:
    """Order-preserving ``decide`` over many frames sharing one grid."""
    grids = {f.grid for f in frames if isinstance(f, GridClassification)}
    if len(grids) > 1:
        raise DecisionError(f"frames use different grids: {sorted(str(g) for g in grids)}")

    decisions = []
    for item in frames:
        try:
            decisions.append(decide(item, config))
        except DecisionError:
            raise
        except ReefDeployError as e:
            raise DecisionError(f"{type(e).__name__}: {e}", frame_id=item.frame_id) from e
    deploys = sum(1 for d in decisions if d.decision is FrameLabel.DEPLOY)
    logger.info(
        f"Decided {len(decisions)} frames with {config.rule.value} at alpha={config.effective_alpha}: {deploys} deploy"
    )
    return decisions


def write_decision_log(
    path: Union[str, Path],
    decisions: Sequence[FrameDecision],
    manifest: Optional[DatasetManifest] = None,
) -> int:
    by_id = manifest.by_id if manifest is not None else {}
    return write_jsonl(path, (d.to_log_json(by_id.get(d.frame_id)) for d in decisions))


def load_decision_log(path: Union[str, Path]) -> List[FrameDecision]:
    decisions = []
    try:
        for line_no, obj in read_jsonl(path):
            try:
                decisions.append(FrameDecision.from_log_json(obj))
            except (KeyError, TypeError, ValidationError) as e:
                raise DecisionError(f"{path} line {line_no}: not a decision record ({e})") from e
    except JsonlDecodeError as e:
        raise DecisionError(f"{path}: {e}") from e
    logger.info(f"Loaded {len(decisions)} decisions from {path}")
    return decisions
