import logging
from reefdeploy._compat import StrEnum
from pathlib import Path
from typing import List, Union

from pydantic import ValidationError

from reefdeploy.exceptions import ManifestError, NoLabelsError
from reefdeploy.models.schemas import DatasetManifest, FrameLabel, FrameRecord, FrameTruths, GridSpec, PatchClass
from reefdeploy.storage import JsonlDecodeError, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)


class LabelLevel(StrEnum):
    PATCH = "patch"
    FRAME = "frame"


def _first_error(e: ValidationError) -> str:
    err = e.errors()[0]
    loc = ".".join(str(part) for part in err["loc"])
    return f"{loc}: {err['msg']}" if loc else err["msg"]


def load_manifest(path: Union[str, Path], grid: GridSpec = GridSpec()) -> DatasetManifest:
    """Read a JSONL manifest, one FrameRecord per line, keeping file order."""
    records: List[FrameRecord] = []
    seen = {}
    try:
        for line_no, obj in read_jsonl(path):
            try:
                record = FrameRecord.from_manifest_json(obj)
            except ValidationError as e:
                raise ManifestError(_first_error(e), line_no=line_no, frame_id=obj.get("frame_id")) from e
            except ValueError as e:
                raise ManifestError(str(e), line_no=line_no) from e
            if record.frame_id in seen:
                raise ManifestError(
                    f"duplicate frame_id (first seen on line {seen[record.frame_id]})",
                    line_no=line_no,
                    frame_id=record.frame_id,
                )
            if record.patch_labels is not None and len(record.patch_labels) != grid.size:
                raise ManifestError(
                    f"{len(record.patch_labels)} patch labels, grid {grid} needs {grid.size}",
                    line_no=line_no,
                    frame_id=record.frame_id,
                )
            seen[record.frame_id] = line_no
            records.append(record)
    except JsonlDecodeError as e:
        raise ManifestError(f"malformed line ({e})", line_no=e.line_no) from e

    manifest = DatasetManifest(grid=grid, records=tuple(records))
    logger.info(f"Loaded manifest {path}: {len(records)} records, grid {grid}")
    return manifest


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    count = write_jsonl(path, (record.to_manifest_json() for record in manifest.records))
    logger.info(f"Wrote manifest {path}: {count} records")


def class_counts(manifest: DatasetManifest, level: LabelLevel) -> List[int]:
    """Counts in class-code order: patch level [no_deploy, coral, deploy], frame level [no_deploy, deploy]."""
    level = LabelLevel(level)
    if level is LabelLevel.PATCH:
        by_class = manifest.patch_class_counts
        counts = [by_class[c] for c in PatchClass]
    else:
        by_label = manifest.frame_class_counts
        counts = [by_label[FrameLabel.NO_DEPLOY], by_label[FrameLabel.DEPLOY]]
    if sum(counts) == 0:
        raise NoLabelsError(f"no {level.value} labels")
    return counts


def frame_truths(manifest: DatasetManifest) -> FrameTruths:
    """Ecologist labels as ``(frame_id, label)`` pairs in manifest order."""
    return [(r.frame_id, r.ecologist_label) for r in manifest.records if r.ecologist_label is not None]
