import json
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from reefdeploy.models.schemas import GridClassification, GridSpec, PatchClass

GRID = GridSpec()


def write_lines(path: Path, rows: Iterable[dict]) -> Path:
    path.write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")
    return path


def read_lines(path: Path) -> List[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def one_hot_grid(frame_id: str, classes: Sequence[int], grid: GridSpec = GRID, confidence: float = 0.8) -> GridClassification:
    """Grid whose argmax classes are ``classes``; the remaining mass is split evenly."""
    rest = (1.0 - confidence) / 2
    probs = np.full((grid.size, 3), rest)
    probs[np.arange(grid.size), np.asarray(classes, dtype=int)] = confidence
    return GridClassification.from_probabilities(frame_id, grid, probs)


def counted_grid(frame_id: str, deploy: int, coral: int = 0, grid: GridSpec = GRID) -> GridClassification:
    classes = [int(PatchClass.DEPLOY)] * deploy + [int(PatchClass.CORAL)] * coral
    classes += [int(PatchClass.NO_DEPLOY)] * (grid.size - len(classes))
    return one_hot_grid(frame_id, classes, grid)

