import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from reefdeploy.exceptions import AlignmentError, ConfigError, DecisionError, DimensionMismatchError, NoLabelsError
from reefdeploy.models.configs import DecisionConfig
from reefdeploy.models.network import MlpModel
from reefdeploy.models.reports import (
    AgreementReport,
    ClassMetrics,
    ConfusionMatrix,
    DeployMetrics,
    MetricsReport,
    PrCurve,
    PrPoint,
)
from reefdeploy.models.schemas import (
    DatasetManifest,
    DecisionRule,
    FrameClassification,
    FrameDecision,
    FrameLabel,
    FrameTruths,
    GridClassification,
    PatchClass,
    RatioConvention,
)
from reefdeploy.services.decision_service import decide, make_decision
from reefdeploy.storage import write_frame_csv

logger = logging.getLogger(__name__)

PATCH_LABELS = tuple(c.slug for c in PatchClass)
FRAME_LABELS = (FrameLabel.NO_DEPLOY.value, FrameLabel.DEPLOY.value)


def confusion(
    preds: Sequence[int],
    truths: Sequence[int],
    num_classes: int,
    labels: Optional[Sequence[str]] = None,
) -> ConfusionMatrix:
    p = np.asarray(preds, dtype=int)
    t = np.asarray(truths, dtype=int)
    if p.shape != t.shape or p.ndim != 1:
        raise AlignmentError(f"{p.size} predictions against {t.size} truths")
    for name, values in (("prediction", p), ("truth", t)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise DimensionMismatchError(f"{name} index outside 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(counts, (t, p), 1)
    labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(num_classes))
    return ConfusionMatrix(counts=tuple(tuple(int(c) for c in row) for row in counts), labels=labels)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def macro_f1(f1s: Sequence[float]) -> float:
    """Unweighted mean of per-class F1 scores."""
    if len(f1s) == 0:
        raise NoLabelsError("macro F1 of zero classes")
    return float(np.mean(f1s))


def report(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class precision, recall and F1, macro F1 and accuracy, all in percent.

    Undefined ratios (no predictions or no truths of a class) count as 0.
    """
    counts = cm.as_array()
    total = counts.sum()
    if total == 0:
        raise NoLabelsError("confusion matrix is empty")
    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    actual = counts.sum(axis=1)

    per_class = []
    for i, label in enumerate(cm.labels):
        precision = _ratio(tp[i], predicted[i])
        recall = _ratio(tp[i], actual[i])
        f1 = _ratio(2 * precision * recall, precision + recall)
        per_class.append(
            ClassMetrics(
                label=label,
                precision=100.0 * precision,
                recall=100.0 * recall,
                f1=100.0 * f1,
                support=int(actual[i]),
            )
        )
    return MetricsReport(
        per_class=tuple(per_class),
        macro_f1=macro_f1([m.f1 for m in per_class]),
        accuracy=100.0 * tp.sum() / total,
    )


def _aligned_labels(decisions: Sequence[FrameDecision], truths: FrameTruths) -> np.ndarray:
    if len(decisions) != len(truths):
        raise AlignmentError(f"{len(decisions)} decisions against {len(truths)} ecologist labels")
    mismatched = [d.frame_id for d, (frame_id, _) in zip(decisions, truths) if d.frame_id != frame_id]
    if mismatched:
        raise AlignmentError(f"frame_id mismatch at {len(mismatched)} positions, first {mismatched[0]!r}")
    return np.asarray([FrameLabel(label).index for _, label in truths], dtype=int)


def decision_confusion(decisions: Sequence[FrameDecision], truths: FrameTruths) -> ConfusionMatrix:
    t = _aligned_labels(decisions, truths)
    p = [d.decision.index for d in decisions]
    return confusion(p, t, 2, FRAME_LABELS)


def deploy_metrics(decisions: Sequence[FrameDecision], truths: FrameTruths) -> DeployMetrics:
    """Binary metrics with Deploy as the positive class; f1 is the macro over both classes."""
    frame_report = report(decision_confusion(decisions, truths))
    deploy = frame_report.for_label(FrameLabel.DEPLOY.value)
    return DeployMetrics(
        deploy_precision=deploy.precision,
        deploy_recall=deploy.recall,
        accuracy=frame_report.accuracy,
        f1=frame_report.macro_f1,
    )


def pr_sweep(
    items: Sequence[Union[GridClassification, FrameClassification]],
    truths: FrameTruths,
    rule: DecisionRule,
    alphas: Sequence[float],
    model: Optional[MlpModel] = None,
    convention: RatioConvention = RatioConvention.DEPLOY_VS_REST,
) -> PrCurve:
    """Re-decide every frame at each alpha and score the decisions against the truths."""
    rule = DecisionRule(rule)
    alphas = [float(a) for a in alphas]
    if any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ConfigError("alphas must be strictly increasing")
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ConfigError("alphas must lie in [0, 1]")
    if rule is DecisionRule.SPATIAL_PATCH_AGGREGATION and model is None:
        raise DecisionError("spatial_patch_aggregation sweep needs an aggregation model")

    config = DecisionConfig(
        rule=rule,
        alpha=0.0,
        aggregation_model=model if rule is DecisionRule.SPATIAL_PATCH_AGGREGATION else None,
        ratio_convention=convention,
    )
    # scores do not depend on alpha
    scores = [(d.frame_id, d.score) for d in (decide(item, config) for item in items)]

    points = []
    for alpha in alphas:
        decisions = [make_decision(frame_id, score, alpha, rule) for frame_id, score in scores]
        metrics = deploy_metrics(decisions, truths)
        points.append(
            PrPoint(
                alpha=alpha,
                deploy_precision=metrics.deploy_precision,
                deploy_recall=metrics.deploy_recall,
                overall_f1=metrics.f1,
                accuracy=metrics.accuracy,
                deploy_count=sum(1 for d in decisions if d.decision is FrameLabel.DEPLOY),
            )
        )
    logger.info(f"Swept {len(alphas)} alphas for {rule.value} over {len(scores)} frames")
    return PrCurve(rule=rule.value, points=tuple(points))


def best_alpha(curve: PrCurve, metric: str = "overall_f1") -> PrPoint:
    """Point maximising ``metric``; ties go to the smallest alpha."""
    if not curve.points:
        raise NoLabelsError("empty PR curve")
    if metric not in PrPoint.model_fields:
        raise ConfigError(f"unknown metric {metric!r}")
    return max(curve.points, key=lambda p: (getattr(p, metric), -p.alpha))


def agreement(engine: Sequence[FrameDecision], ecologist: FrameTruths) -> AgreementReport:
    """Score engine decisions with the ecologist's labels as ground truth."""
    truth_index = _aligned_labels(engine, ecologist)
    flags = tuple(bool(d.decision.index == t) for d, t in zip(engine, truth_index))
    result = AgreementReport(
        report=report(decision_confusion(engine, ecologist)),
        flags=flags,
        frame_ids=tuple(d.frame_id for d in engine),
    )
    logger.info(f"Ecologist agreement {result.accuracy:.2f}% over {len(flags)} frames")
    return result


def patch_confusion(grids: Sequence[GridClassification], manifest: DatasetManifest) -> ConfusionMatrix:
    """Predicted patch classes against the manifest's patch labels."""
    preds: List[int] = []
    truths: List[int] = []
    unlabeled = []
    for gc in grids:
        record = manifest.by_id.get(gc.frame_id)
        if record is None or record.patch_labels is None:
            unlabeled.append(gc.frame_id)
            continue
        preds.extend(int(c) for c in gc.predicted)
        truths.extend(int(c) for c in record.patch_labels)
    if unlabeled:
        raise AlignmentError(f"{len(unlabeled)} frames have no patch labels, first {unlabeled[0]!r}")
    return confusion(preds, truths, len(PatchClass), PATCH_LABELS)


def report_frame(metrics: MetricsReport) -> pd.DataFrame:
    rows = [m.model_dump() for m in metrics.per_class]
    rows.append({"label": "macro", "precision": None, "recall": None, "f1": metrics.macro_f1, "support": None})
    rows.append({"label": "accuracy", "precision": None, "recall": None, "f1": metrics.accuracy, "support": None})
    return pd.DataFrame(rows, columns=["label", "precision", "recall", "f1", "support"])


def format_report(metrics: MetricsReport, cm: Optional[ConfusionMatrix] = None) -> str:
    df = report_frame(metrics)
    text = df.to_string(index=False, float_format=lambda v: f"{v:.2f}", na_rep="")
    if cm is not None:
        matrix = pd.DataFrame(cm.as_array(), index=[f"true {label}" for label in cm.labels], columns=list(cm.labels))
        text += "\n\n" + matrix.to_string()
    return text


def write_report_csv(path: Union[str, Path], metrics: MetricsReport) -> None:
    write_frame_csv(path, report_frame(metrics))


def curve_frame(curve: PrCurve) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "alpha": p.alpha,
                "precision": p.deploy_precision,
                "recall": p.deploy_recall,
                "f1": p.overall_f1,
                "accuracy": p.accuracy,
                "deploy_count": p.deploy_count,
            }
            for p in curve.points
        ],
        columns=["alpha", "precision", "recall", "f1", "accuracy", "deploy_count"],
    )


def write_pr_curve_csv(path: Union[str, Path], curve: PrCurve) -> None:
    write_frame_csv(path, curve_frame(curve))
