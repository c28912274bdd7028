import io
import logging
from pathlib import Path
from typing import List, Tuple, Union

from PIL import Image

from reefdeploy.exceptions import TilingError
from reefdeploy.models.schemas import GridSpec, PatchRect

logger = logging.getLogger(__name__)


def tile(frame_w: int, frame_h: int, grid: GridSpec) -> List[PatchRect]:
    """Split a frame into ``grid`` equal patches in row-major order.

    Right and bottom residual pixels that do not fill a whole patch are left out,
    so every patch has the same size.
    """
    patch_w, patch_h = frame_w // grid.cols, frame_h // grid.rows
    if patch_w <= 0 or patch_h <= 0:
        raise TilingError(
            f"frame {frame_w}x{frame_h} is smaller than grid {grid}: patch size would be {patch_w}x{patch_h}"
        )
    return [
        PatchRect(x=col * patch_w, y=row * patch_h, w=patch_w, h=patch_h, index=row * grid.cols + col)
        for row in range(grid.rows)
        for col in range(grid.cols)
    ]


def patch_index(row: int, col: int, grid: GridSpec) -> int:
    if not (0 <= row < grid.rows and 0 <= col < grid.cols):
        raise TilingError(f"cell ({row}, {col}) outside grid {grid}")
    return row * grid.cols + col


def patch_position(index: int, grid: GridSpec) -> Tuple[int, int]:
    if not 0 <= index < grid.size:
        raise TilingError(f"patch index {index} outside grid {grid}")
    return divmod(index, grid.cols)


def image_dimensions(path: Union[str, Path]) -> Tuple[int, int]:
    # Image.open only reads the header here
    try:
        with Image.open(path) as im:
            return im.size
    except (OSError, ValueError) as e:
        raise TilingError(f"cannot read image {path}: {e}") from e


def crop_patches(path: Union[str, Path], grid: GridSpec, image_format: str = "PNG") -> List[Tuple[int, bytes]]:
    """Encode every grid patch of an image as ``(patch_index, bytes)``."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            rects = tile(im.width, im.height, grid)
            patches = []
            for rect in rects:
                buf = io.BytesIO()
                im.crop(rect.box).save(buf, format=image_format)
                patches.append((rect.index, buf.getvalue()))
    except OSError as e:
        raise TilingError(f"cannot read image {path}: {e}") from e
    logger.debug(f"Cropped {len(patches)} patches from {path}")
    return patches
