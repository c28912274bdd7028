import json
import logging
from collections import Counter
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import pandas as pd
from pydantic import ValidationError

from reefdeploy.exceptions import GeoTrackError
from reefdeploy.models.reports import GeoTrack, TrackEntry
from reefdeploy.models.schemas import DatasetManifest, FrameDecision
from reefdeploy.storage import atomic_write_text, write_frame_csv

logger = logging.getLogger(__name__)

COORD_DECIMALS = 9


def bind(decisions: Sequence[FrameDecision], manifest: DatasetManifest) -> GeoTrack:
    """Attach positions, timestamps and ecologist labels; entries follow manifest order."""
    counts = Counter(d.frame_id for d in decisions)
    duplicated = [frame_id for frame_id, n in counts.items() if n > 1]
    if duplicated:
        raise GeoTrackError("more than one decision per frame", duplicated)
    decided = {d.frame_id: d for d in decisions}
    unknown = [frame_id for frame_id in decided if frame_id not in manifest.by_id]
    if unknown:
        raise GeoTrackError("decisions for frames missing from the manifest", unknown)
    missing_geo = [r.frame_id for r in manifest.records if r.frame_id in decided and r.geo is None]
    if missing_geo:
        raise GeoTrackError("decided frames without a position", missing_geo)

    entries = []
    for record in manifest.records:
        decision = decided.get(record.frame_id)
        if decision is None:
            continue
        label = record.ecologist_label
        entries.append(
            TrackEntry(
                geo=record.geo,
                decision=decision,
                timestamp_ms=record.timestamp_ms,
                ecologist_label=label,
                agree=None if label is None else decision.decision is label,
            )
        )
    try:
        return GeoTrack(entries=tuple(entries))
    except ValidationError as e:
        raise GeoTrackError(f"invalid track: {e.errors()[0]['msg']}") from e


def _properties(entry: TrackEntry) -> Dict[str, Any]:
    d = entry.decision
    props: Dict[str, Any] = {
        "frame_id": d.frame_id,
        "decision": d.decision.value,
        "score": d.score,
        "alpha": d.alpha,
        "rule": d.rule.value,
    }
    if entry.ecologist_label is not None:
        props["ecologist_label"] = entry.ecologist_label.value
        props["agree"] = entry.agree
    if entry.geo.depth_m is not None:
        props["depth_m"] = entry.geo.depth_m
    if entry.timestamp_ms is not None:
        props["timestamp_ms"] = entry.timestamp_ms
    return props


def to_feature_collection(track: GeoTrack) -> Dict[str, Any]:
    features: List[Dict[str, Any]] = []
    for entry in track.entries:
        features.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "Point",
                    # GeoJSON positions are [longitude, latitude]
                    "coordinates": [round(entry.geo.lon, COORD_DECIMALS), round(entry.geo.lat, COORD_DECIMALS)],
                },
                "properties": _properties(entry),
            }
        )
    return {"type": "FeatureCollection", "features": features}


def export_geojson(track: GeoTrack, path: Union[str, Path]) -> None:
    atomic_write_text(path, json.dumps(to_feature_collection(track), indent=2) + "\n")
    logger.info(f"Wrote {len(track)} track points to {path}")


def track_frame(track: GeoTrack) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "frame_id": e.decision.frame_id,
                "lat": e.geo.lat,
                "lon": e.geo.lon,
                "decision": e.decision.decision.value,
                "score": e.decision.score,
                "ecologist_label": e.ecologist_label.value if e.ecologist_label is not None else None,
                "agree": e.agree,
            }
            for e in track.entries
        ],
        columns=["frame_id", "lat", "lon", "decision", "score", "ecologist_label", "agree"],
    )


def export_track_csv(track: GeoTrack, path: Union[str, Path]) -> None:
    write_frame_csv(path, track_frame(track))
