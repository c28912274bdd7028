from pathlib import Path
from typing import List

import pytest

from reefdeploy.models.schemas import GridSpec
from tests.helpers import GRID, write_lines


@pytest.fixture
def grid() -> GridSpec:
    return GRID


@pytest.fixture
def manifest_rows() -> List[dict]:
    return [
        {"frame_id": "f0", "source": "f0.png", "timestamp_ms": 1000, "lat": -18.2861, "lon": 147.7, "ecologist_label": "deploy"},
        {"frame_id": "f1", "source": "f1.png", "timestamp_ms": 1200, "lat": -18.2862, "lon": 147.7001, "ecologist_label": "no_deploy"},
        {"frame_id": "f2", "source": "f2.png", "timestamp_ms": 1400, "lat": -18.2863, "lon": 147.7002, "depth_m": 6.5},
        {"frame_id": "p0", "source": "p0.png", "patch_labels": [0, 1, 2, 2] * 7},
    ]


@pytest.fixture
def manifest_path(tmp_path, manifest_rows) -> Path:
    return write_lines(tmp_path / "manifest.jsonl", manifest_rows)
