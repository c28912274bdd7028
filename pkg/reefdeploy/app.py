import json
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Type

import click
import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from reefdeploy.exceptions import AlignmentError, ConfigError, ReefDeployError
from reefdeploy.models.configs import (
    DecisionConfig,
    DropPolicy,
    FocalLossConfig,
    StreamConfig,
    TrainConfig,
    VlmProvider,
)
from reefdeploy.models.network import load_model, save_model
from reefdeploy.models.reports import LabelingResult
from reefdeploy.models.schemas import DatasetManifest, DecisionRule, FrameLabel, FrameRecord, GridSpec, RatioConvention
from reefdeploy.services import (
    classification_service,
    decision_service,
    geotrack_service,
    manifest_service,
    metrics_service,
    pseudolabel_service,
    stream_service,
    tiling_service,
    training_service,
    vlm_service,
)
from reefdeploy.settings import Settings, load_config_file

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
GLOBAL_KEYS = {"config", "seed", "deterministic", "verbose"}


class GridParamType(click.ParamType):
    name = "grid"

    def convert(self, value, param, ctx):
        if isinstance(value, GridSpec):
            return value
        try:
            return GridSpec.parse(str(value))
        except ValueError as e:
            self.fail(f"{value!r} is not a valid ROWSxCOLS grid ({e})", param, ctx)


class AlphaGridParamType(click.ParamType):
    """``start:stop:step`` (stop included) or a comma-separated list."""

    name = "alphas"

    def convert(self, value, param, ctx):
        if isinstance(value, (list, tuple)):
            return list(value)
        text = str(value).strip()
        try:
            if ":" in text:
                start, stop, step = (float(part) for part in text.split(":"))
                if step <= 0:
                    raise ValueError("step must be positive")
                count = int(round((stop - start) / step))
                alphas = [round(start + i * step, 10) for i in range(count + 1)]
            else:
                alphas = [float(part) for part in text.split(",") if part.strip()]
        except ValueError as e:
            self.fail(f"{value!r} is not an alpha grid ({e})", param, ctx)
        if not alphas or any(not 0.0 <= a <= 1.0 for a in alphas):
            self.fail("alphas must lie in [0, 1]", param, ctx)
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            self.fail("alphas must be strictly increasing", param, ctx)
        return alphas


GRID = GridParamType()
ALPHAS = AlphaGridParamType()
RULES = click.Choice([r.value for r in DecisionRule])
CONVENTIONS = click.Choice([c.value for c in RatioConvention])
EXISTING_FILE = click.Path(exists=True, dir_okay=False, path_type=Path)
OUTPUT_FILE = click.Path(dir_okay=False, path_type=Path)


class CliState(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = 0
    deterministic: bool = False
    settings: Settings = Settings()


class ReefDeployGroup(click.Group):
    """Reports engine errors as one ``error: <Class>: <message>`` line and exit status 1."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except ReefDeployError as e:
            click.echo(f"error: {type(e).__name__}: {e}", err=True)
            ctx.exit(1)

    def config_default_map(self, values: Dict[str, str]) -> Dict[str, Dict[str, str]]:
        per_command = {name: {p.name for p in cmd.params} for name, cmd in self.commands.items()}
        known = set(GLOBAL_KEYS).union(*per_command.values())
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return {name: {k: v for k, v in values.items() if k in params} for name, params in per_command.items()}


def _build(model_cls: Type[BaseModel], **kwargs: Any) -> Any:
    try:
        return model_cls(**kwargs)
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(part) for part in err["loc"])
        raise click.UsageError(f"invalid {model_cls.__name__}: {loc + ': ' if loc else ''}{err['msg']}")


def _log_params(ctx: click.Context) -> None:
    logger.info(f"{ctx.info_name} parameters: {json.dumps(ctx.params, default=str, sort_keys=True)}")


def _global_from_file(ctx: click.Context, name: str, values: Dict[str, str], current: Any, kind: click.ParamType):
    if name in values and ctx.get_parameter_source(name) is click.core.ParameterSource.DEFAULT:
        return kind.convert(values[name], None, ctx)
    return current


@click.group(cls=ReefDeployGroup)
@click.option("--config", type=EXISTING_FILE, default=None, help="Flat key=value file of default parameters.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for training and the mock backend.")
@click.option("--deterministic", is_flag=True, help="Use a virtual clock so stream runs are reproducible.")
@click.option("--verbose", "-v", is_flag=True, help="Log at DEBUG level.")
@click.pass_context
def cli(ctx: click.Context, config: Optional[Path], seed: int, deterministic: bool, verbose: bool):
    """Substrate decision engine for coral-device dispensing."""
    settings = Settings.from_env()
    values = load_config_file(config) if config is not None else {}
    ctx.default_map = ctx.command.config_default_map(values)
    seed = _global_from_file(ctx, "seed", values, seed, click.INT)
    deterministic = _global_from_file(ctx, "deterministic", values, deterministic, click.BOOL)
    verbose = _global_from_file(ctx, "verbose", values, verbose, click.BOOL)

    logging.basicConfig(level=logging.DEBUG if verbose else settings.log_level.upper(), format=LOG_FORMAT)
    ctx.obj = CliState(seed=seed, deterministic=deterministic, settings=settings)
    logger.debug(f"Global options: seed={seed} deterministic={deterministic} config={config}")


def grid_option(f):
    return click.option("--grid", type=GRID, default="4x7", show_default=True, help="Patch grid as ROWSxCOLS.")(f)


def backend_options(f):
    options = [
        click.option(
            "--backend",
            type=click.Choice(["mock", "predictions", "native"]),
            default="mock",
            show_default=True,
            help="Classifier backend.",
        ),
        click.option("--predictions", type=EXISTING_FILE, help="Predictions JSONL for the predictions backend."),
        click.option("--features", type=EXISTING_FILE, help="Feature JSONL for the native backend."),
        click.option("--patch-model", type=EXISTING_FILE, help="Softmax patch-head checkpoint."),
        click.option("--frame-model", type=EXISTING_FILE, help="Whole-frame head checkpoint."),
        click.option("--mock-delay-ms", type=click.FloatRange(min=0.0), default=0.0, show_default=True),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def decision_options(f):
    options = [
        click.option("--rule", type=RULES, default=DecisionRule.THRESHOLDING_WITH_PATCHES.value, show_default=True),
        click.option(
            "--alpha",
            type=click.FloatRange(0.0, 1.0),
            default=None,
            help="Deployment threshold; defaults to the rule's reported operating point.",
        ),
        click.option("--model", type=EXISTING_FILE, help="Aggregation network checkpoint."),
        click.option(
            "--ratio-convention",
            type=CONVENTIONS,
            default=RatioConvention.DEPLOY_VS_REST.value,
            show_default=True,
        ),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def _build_backend(
    state: CliState,
    backend: str,
    predictions: Optional[Path],
    features: Optional[Path],
    patch_model: Optional[Path],
    frame_model: Optional[Path],
    mock_delay_ms: float,
    sleep=time.sleep,
) -> classification_service.ClassifierBackend:
    if backend == "mock":
        return classification_service.MockBackend(seed=state.seed, delay_ms=mock_delay_ms, sleep=sleep)
    if backend == "predictions":
        if predictions is None:
            raise click.UsageError("--predictions is required for the predictions backend")
        return classification_service.load_predictions(predictions)
    if features is None or (patch_model is None and frame_model is None):
        raise click.UsageError("the native backend needs --features and --patch-model or --frame-model")
    return classification_service.NativeHeadBackend(
        classification_service.FeatureStore.from_file(features),
        patch_model=load_model(patch_model) if patch_model else None,
        frame_model=load_model(frame_model) if frame_model else None,
    )


def _decision_config(rule: str, alpha: Optional[float], model: Optional[Path], ratio_convention: str) -> DecisionConfig:
    rule = DecisionRule(rule)
    if rule is DecisionRule.SPATIAL_PATCH_AGGREGATION and model is None:
        raise click.UsageError("--model is required for spatial_patch_aggregation")
    if rule is not DecisionRule.SPATIAL_PATCH_AGGREGATION and model is not None:
        raise click.UsageError(f"--model only applies to spatial_patch_aggregation, not {rule.value}")
    return _build(
        DecisionConfig,
        rule=rule,
        alpha=alpha,
        aggregation_model=load_model(model) if model is not None else None,
        ratio_convention=RatioConvention(ratio_convention),
    )


def _classify(
    backend: classification_service.ClassifierBackend,
    records: Sequence[FrameRecord],
    rule: DecisionRule,
    grid: GridSpec,
) -> List[Any]:
    if rule is DecisionRule.WHOLE_IMAGE:
        return [classification_service.classify_frame(backend, r) for r in records]
    return [classification_service.classify_patches(backend, r, grid) for r in records]


def _labelled_records(manifest: DatasetManifest) -> List[FrameRecord]:
    records = [r for r in manifest.records if r.ecologist_label is not None]
    if not records:
        raise AlignmentError("manifest has no ecologist labels")
    return records


@cli.command()
@click.argument("image", required=False, type=EXISTING_FILE)
@click.option("--width", type=click.IntRange(min=1), help="Frame width in pixels when no image is given.")
@click.option("--height", type=click.IntRange(min=1), help="Frame height in pixels when no image is given.")
@grid_option
@click.pass_context
def tile(ctx: click.Context, image: Optional[Path], width: Optional[int], height: Optional[int], grid: GridSpec):
    """List the patch rectangles of a frame in row-major order."""
    _log_params(ctx)
    if image is not None:
        width, height = tiling_service.image_dimensions(image)
    elif width is None or height is None:
        raise click.UsageError("give an IMAGE or both --width and --height")
    for rect in tiling_service.tile(width, height, grid):
        row, col = tiling_service.patch_position(rect.index, grid)
        click.echo(json.dumps({"index": rect.index, "row": row, "col": col, "x": rect.x, "y": rect.y, "w": rect.w, "h": rect.h}))


@cli.command()
@click.option("--manifest", type=EXISTING_FILE, required=True)
@click.option("--level", type=click.Choice(["patch", "frame"]), default="patch", show_default=True)
@click.option("--out", type=OUTPUT_FILE, required=True, help="Predictions JSONL to write.")
@click.option("--show-grid", is_flag=True, help="Print each frame's coarse segmentation.")
@backend_options
@grid_option
@click.pass_context
def classify(ctx: click.Context, manifest, level, out, show_grid, backend, predictions, features, patch_model, frame_model, mock_delay_ms, grid):
    """Classify every manifest frame and write a predictions file."""
    _log_params(ctx)
    state: CliState = ctx.obj
    records = manifest_service.load_manifest(manifest, grid).records
    clf = _build_backend(state, backend, predictions, features, patch_model, frame_model, mock_delay_ms)
    rule = DecisionRule.WHOLE_IMAGE if level == "frame" else DecisionRule.THRESHOLDING_WITH_PATCHES
    items = _classify(clf, records, rule, grid)
    classification_service.write_predictions(out, items)
    if show_grid and level == "patch":
        for gc in items:
            click.echo(f"{gc.frame_id} (coral cover {gc.coral_cover:.2f})")
            for row in gc.segmentation():
                click.echo(" ".join(str(c) for c in row))
    click.echo(f"classified {len(items)} frames -> {out}")


@cli.command()
@click.option("--predictions", type=EXISTING_FILE, required=True)
@click.option("--manifest", type=EXISTING_FILE, help="Frame order plus positions for the log.")
@click.option("--out", type=OUTPUT_FILE, required=True, help="Decision log JSONL to write.")
@decision_options
@grid_option
@click.pass_context
def decide(ctx: click.Context, predictions, manifest, out, rule, alpha, model, ratio_convention, grid):
    """Turn predictions into per-frame Deploy / No-Deploy decisions."""
    _log_params(ctx)
    config = _decision_config(rule, alpha, model, ratio_convention)
    backend = classification_service.load_predictions(predictions)
    dataset = manifest_service.load_manifest(manifest, grid) if manifest is not None else None
    records = dataset.records if dataset is not None else [FrameRecord(frame_id=f) for f in backend.frame_ids()]
    decisions = decision_service.decide_batch(_classify(backend, records, config.rule, grid), config)
    decision_service.write_decision_log(out, decisions, dataset)
    deploys = sum(1 for d in decisions if d.decision is FrameLabel.DEPLOY)
    click.echo(f"{len(decisions)} decisions ({deploys} deploy) at alpha={config.effective_alpha} -> {out}")


@cli.command()
@click.option("--target", type=click.Choice(["patch", "frame", "aggregation"]), default="patch", show_default=True)
@click.option("--labels", type=EXISTING_FILE, required=True, help="Manifest holding the training labels.")
@click.option("--features", type=EXISTING_FILE, help="Feature JSONL (patch and frame targets).")
@click.option("--predictions", type=EXISTING_FILE, help="Patch predictions (aggregation target).")
@click.option("--hidden", default="", help="Comma-separated hidden layer widths.")
@click.option("--epochs", type=click.IntRange(min=0), default=50, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("--learning-rate", type=click.FloatRange(min=0.0), default=0.01, show_default=True)
@click.option("--momentum", type=click.FloatRange(0.0, 1.0, max_open=True), default=0.9, show_default=True)
@click.option("--gamma", type=click.FloatRange(min=0.0), default=2.0, show_default=True)
@click.option("--oversample/--no-oversample", default=True, show_default=True)
@click.option("--class-weighting/--no-class-weighting", default=True, show_default=True)
@click.option("--out", type=OUTPUT_FILE, required=True, help="Checkpoint to write.")
@click.option("--loss-trace", type=OUTPUT_FILE, help="CSV of the per-epoch training loss.")
@grid_option
@click.pass_context
def train(
    ctx: click.Context,
    target,
    labels,
    features,
    predictions,
    hidden,
    epochs,
    batch_size,
    learning_rate,
    momentum,
    gamma,
    oversample,
    class_weighting,
    out,
    loss_trace,
    grid,
):
    """Train a patch head, a whole-frame head or the aggregation network."""
    _log_params(ctx)
    state: CliState = ctx.obj
    try:
        widths = tuple(int(w) for w in hidden.split(",") if w.strip())
    except ValueError:
        raise click.UsageError(f"--hidden must be comma-separated integers, got {hidden!r}")
    config = _build(
        TrainConfig,
        epochs=epochs,
        batch_size=batch_size,
        learning_rate=learning_rate,
        momentum=momentum,
        seed=state.seed,
        oversample=oversample,
        class_weighting=class_weighting,
        focal=FocalLossConfig(gamma=gamma),
    )
    dataset = manifest_service.load_manifest(labels, grid)

    if target == "aggregation":
        if predictions is None:
            raise click.UsageError("--predictions is required for the aggregation target")
        backend = classification_service.load_predictions(predictions)
        records = _labelled_records(dataset)
        grids = [classification_service.classify_patches(backend, r, grid) for r in records]
        result = training_service.train_aggregation_network(
            grids,
            manifest_service.frame_truths(dataset),
            config,
            hidden=widths[0] if widths else training_service.AGGREGATION_HIDDEN,
        )
    else:
        if features is None:
            raise click.UsageError(f"--features is required for the {target} target")
        store = classification_service.FeatureStore.from_file(features)
        trainer = training_service.train_patch_head if target == "patch" else training_service.train_frame_head
        result = trainer(store, dataset, config, hidden=widths)

    save_model(result.model, out)
    if loss_trace is not None:
        training_service.write_loss_trace(loss_trace, result)
    click.echo(f"loss {result.initial_loss:.6f} -> {result.final_loss:.6f}; checkpoint {out}")


@cli.command()
@click.option("--mode", type=click.Choice(["vlm", "similarity"]), required=True)
@click.option("--manifest", type=EXISTING_FILE, help="Frames to label (vlm) or to fill with labels.")
@click.option("--image-root", type=click.Path(file_okay=False, path_type=Path), default=Path("."), show_default=True)
@click.option("--embeddings", type=EXISTING_FILE, help="Patch embeddings JSONL (similarity mode).")
@click.option("--prompts", type=EXISTING_FILE, help="Class prompt embeddings JSONL (similarity mode).")
@click.option("--out", type=OUTPUT_FILE, required=True, help="Pseudo-label JSONL to write.")
@click.option("--rejects", type=OUTPUT_FILE, help="Rejected patches JSONL; defaults next to --out.")
@click.option("--labeled-manifest", type=OUTPUT_FILE, help="Write the manifest with patch labels filled in.")
@click.option("--audit", type=OUTPUT_FILE, help="Append every VLM exchange to this JSONL.")
@click.option("--provider", type=click.Choice([p.value for p in VlmProvider]), default=None)
@click.option("--endpoint", default=None)
@click.option("--vlm-model", default=None)
@click.option("--credential", default=None, help="Name of the environment variable holding the API key.")
@click.option("--max-in-flight", type=click.IntRange(min=1), default=None)
@click.option("--retries", type=click.IntRange(min=0), default=None)
@click.option("--backoff-ms", type=click.IntRange(min=1), default=None)
@click.option("--confidence-floor", type=click.FloatRange(0.0, 1.0), default=None)
@grid_option
@click.pass_context
def pseudolabel(
    ctx: click.Context,
    mode,
    manifest,
    image_root,
    embeddings,
    prompts,
    out,
    rejects,
    labeled_manifest,
    audit,
    provider,
    endpoint,
    vlm_model,
    credential,
    max_in_flight,
    retries,
    backoff_ms,
    confidence_floor,
    grid,
):
    """Label patches with a chat VLM or by prompt-embedding similarity."""
    _log_params(ctx)
    state: CliState = ctx.obj
    dataset = manifest_service.load_manifest(manifest, grid) if manifest is not None else None

    if mode == "vlm":
        if dataset is None:
            raise click.UsageError("--manifest is required in vlm mode")
        config = state.settings.vlm_client_config(
            provider=provider,
            endpoint=endpoint,
            model=vlm_model,
            credential=credential,
            max_in_flight=max_in_flight,
            retries=retries,
            backoff_ms=backoff_ms,
            confidence_floor=confidence_floor,
        )
        audit_log = vlm_service.AuditLog(audit) if audit is not None else None
        transport = vlm_service.create_transport(config, state.settings, audit=audit_log)
        patches = pseudolabel_service.manifest_patches(dataset, image_root)
        result = pseudolabel_service.label_patches_vlm(transport, patches, config)
    else:
        if embeddings is None or prompts is None:
            raise click.UsageError("--embeddings and --prompts are required in similarity mode")
        store = classification_service.FeatureStore.from_file(embeddings)
        prompt_embeddings = pseudolabel_service.PromptEmbeddings.from_file(prompts)
        labels = pseudolabel_service.label_patches_similarity(store.records(), prompt_embeddings)
        result = LabelingResult(labels=tuple(labels))

    rejects = rejects or out.with_name(f"{out.stem}.rejects.jsonl")
    pseudolabel_service.write_labels(out, result)
    pseudolabel_service.write_rejects(rejects, result)
    if labeled_manifest is not None:
        if dataset is None:
            raise click.UsageError("--labeled-manifest needs --manifest")
        manifest_service.write_manifest(pseudolabel_service.labels_to_manifest(result.labels, dataset), labeled_manifest)
    click.echo(f"{len(result.labels)} labels -> {out}; {len(result.rejects)} rejects -> {rejects}")


@cli.command(name="eval")
@click.option("--level", type=click.Choice(["patch", "frame"]), default="frame", show_default=True)
@click.option("--predictions", type=EXISTING_FILE, help="Patch predictions (patch level).")
@click.option("--decisions", type=EXISTING_FILE, help="Decision log (frame level).")
@click.option("--manifest", type=EXISTING_FILE, required=True, help="Manifest holding the ground truth.")
@click.option("--csv", "csv_path", type=OUTPUT_FILE, help="Also write the report as CSV.")
@grid_option
@click.pass_context
def evaluate(ctx: click.Context, level, predictions, decisions, manifest, csv_path, grid):
    """Score patch predictions or frame decisions against the manifest labels."""
    _log_params(ctx)
    dataset = manifest_service.load_manifest(manifest, grid)
    if level == "patch":
        if predictions is None:
            raise click.UsageError("--predictions is required at patch level")
        backend = classification_service.load_predictions(predictions)
        records = [r for r in dataset.records if r.patch_labels is not None]
        cm = metrics_service.patch_confusion([classification_service.classify_patches(backend, r, grid) for r in records], dataset)
        result = metrics_service.report(cm)
    else:
        if decisions is None:
            raise click.UsageError("--decisions is required at frame level")
        decided = decision_service.load_decision_log(decisions)
        unlabelled = [
            d.frame_id
            for d in decided
            if d.frame_id not in dataset.by_id or dataset.by_id[d.frame_id].ecologist_label is None
        ]
        if unlabelled:
            raise AlignmentError(f"{len(unlabelled)} decided frames have no ecologist label, first {unlabelled[0]!r}")
        truths = [(d.frame_id, dataset.by_id[d.frame_id].ecologist_label) for d in decided]
        cm = metrics_service.decision_confusion(decided, truths)
        result = metrics_service.agreement(decided, truths).report
    click.echo(metrics_service.format_report(result, cm))
    if csv_path is not None:
        metrics_service.write_report_csv(csv_path, result)


@cli.command()
@click.option("--predictions", type=EXISTING_FILE, required=True)
@click.option("--manifest", type=EXISTING_FILE, required=True, help="Manifest holding ecologist labels.")
@click.option("--rule", type=RULES, default=DecisionRule.THRESHOLDING_WITH_PATCHES.value, show_default=True)
@click.option("--alphas", type=ALPHAS, default="0:1:0.05", show_default=True, help="start:stop:step or a list.")
@click.option("--model", type=EXISTING_FILE, help="Aggregation network checkpoint.")
@click.option("--ratio-convention", type=CONVENTIONS, default=RatioConvention.DEPLOY_VS_REST.value, show_default=True)
@click.option("--metric", type=click.Choice(["overall_f1", "accuracy"]), default="overall_f1", show_default=True)
@click.option("--out", type=OUTPUT_FILE, required=True, help="PR curve CSV to write.")
@grid_option
@click.pass_context
def sweep(ctx: click.Context, predictions, manifest, rule, alphas, model, ratio_convention, metric, out, grid):
    """Sweep alpha and write the precision-recall curve."""
    _log_params(ctx)
    rule = DecisionRule(rule)
    if rule is DecisionRule.SPATIAL_PATCH_AGGREGATION and model is None:
        raise click.UsageError("--model is required for spatial_patch_aggregation")
    dataset = manifest_service.load_manifest(manifest, grid)
    backend = classification_service.load_predictions(predictions)
    items = _classify(backend, _labelled_records(dataset), rule, grid)
    curve = metrics_service.pr_sweep(
        items,
        manifest_service.frame_truths(dataset),
        rule,
        alphas,
        model=load_model(model) if model is not None else None,
        convention=RatioConvention(ratio_convention),
    )
    metrics_service.write_pr_curve_csv(out, curve)
    best = metrics_service.best_alpha(curve, metric)
    click.echo(
        f"best alpha {best.alpha} ({metric}): precision {best.deploy_precision:.2f} "
        f"recall {best.deploy_recall:.2f} f1 {best.overall_f1:.2f} accuracy {best.accuracy:.2f}"
    )


@cli.command(name="map")
@click.option("--decisions", type=EXISTING_FILE, required=True)
@click.option("--manifest", type=EXISTING_FILE, required=True)
@click.option("--out", type=OUTPUT_FILE, required=True, help="GeoJSON file to write.")
@click.option("--csv", "csv_path", type=OUTPUT_FILE, help="Also write the track as CSV.")
@grid_option
@click.pass_context
def map_track(ctx: click.Context, decisions, manifest, out, csv_path, grid):
    """Export decisions as a GeoJSON deployment map."""
    _log_params(ctx)
    track = geotrack_service.bind(decision_service.load_decision_log(decisions), manifest_service.load_manifest(manifest, grid))
    geotrack_service.export_geojson(track, out)
    if csv_path is not None:
        geotrack_service.export_track_csv(track, csv_path)
    agreed = [e.agree for e in track.entries if e.agree is not None]
    suffix = f", ecologist agreement {100.0 * np.mean(agreed):.2f}%" if agreed else ""
    click.echo(f"{len(track)} points -> {out}{suffix}")


@cli.command()
@click.option("--manifest", type=EXISTING_FILE, required=True, help="Frames to replay, in capture order.")
@backend_options
@decision_options
@click.option("--fps", type=click.FloatRange(min=0.0, min_open=True), default=5.5, show_default=True)
@click.option("--drop-policy", type=click.Choice([p.value for p in DropPolicy]), default=DropPolicy.LATEST_WINS.value, show_default=True)
@click.option("--queue-capacity", type=click.IntRange(min=1), default=8, show_default=True)
@click.option("--max-frames", type=click.IntRange(min=1), default=None)
@click.option("--duration-s", type=click.FloatRange(min=0.0, min_open=True), default=None)
@click.option("--log", "log_path", type=OUTPUT_FILE, help="Streamed decision log JSONL.")
@click.option("--timing-csv", type=OUTPUT_FILE, help="Timing summary CSV.")
@grid_option
@click.pass_context
def simulate(
    ctx: click.Context,
    manifest,
    backend,
    predictions,
    features,
    patch_model,
    frame_model,
    mock_delay_ms,
    rule,
    alpha,
    model,
    ratio_convention,
    fps,
    drop_policy,
    queue_capacity,
    max_frames,
    duration_s,
    log_path,
    timing_csv,
    grid,
):
    """Replay manifest frames through the real-time pipeline."""
    _log_params(ctx)
    state: CliState = ctx.obj
    clock = stream_service.VirtualClock() if state.deterministic else stream_service.RealClock()
    clf = _build_backend(state, backend, predictions, features, patch_model, frame_model, mock_delay_ms, sleep=clock.sleep)
    decision_config = _decision_config(rule, alpha, model, ratio_convention)
    stream_config = _build(
        StreamConfig,
        capture_fps=fps,
        drop_policy=DropPolicy(drop_policy),
        queue_capacity=queue_capacity,
        max_frames=max_frames,
        duration_s=duration_s,
    )
    records = manifest_service.load_manifest(manifest, grid).records
    _, stats = stream_service.run_stream(records, clf, decision_config, stream_config, grid=grid, clock=clock, log_path=log_path)
    click.echo(stream_service.summarize(stats))
    if timing_csv is not None:
        stream_service.write_timing_csv(timing_csv, stats)
