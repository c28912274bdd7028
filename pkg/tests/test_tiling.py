import io

import pytest
from PIL import Image

from reefdeploy.exceptions import TilingError
from reefdeploy.models.schemas import GridSpec
from reefdeploy.services.tiling_service import crop_patches, image_dimensions, patch_index, patch_position, tile


def test_field_frame_splits_into_square_patches(grid):
    rects = tile(2800, 1600, grid)
    assert len(rects) == 28
    assert {(r.w, r.h) for r in rects} == {(400, 400)}
    assert [r.index for r in rects] == list(range(28))
    assert (rects[7].x, rects[7].y) == (0, 400)
    assert (rects[27].x, rects[27].y) == (2400, 1200)


def test_residual_pixels_are_dropped(grid):
    rects = tile(2806, 1603, grid)
    assert {(r.w, r.h) for r in rects} == {(400, 400)}
    assert max(r.x + r.w for r in rects) == 2800
    assert max(r.y + r.h for r in rects) == 1600


def test_patches_do_not_overlap():
    rects = tile(100, 60, GridSpec(rows=3, cols=5))
    covered = set()
    for r in rects:
        cells = {(x, y) for x in range(r.x, r.x + r.w) for y in range(r.y, r.y + r.h)}
        assert not covered & cells
        covered |= cells
    assert len(covered) == 100 * 60


def test_frame_smaller_than_grid(grid):
    with pytest.raises(TilingError):
        tile(6, 3, grid)


def test_index_and_position_agree(grid):
    for index in range(grid.size):
        row, col = patch_position(index, grid)
        assert patch_index(row, col, grid) == index
    assert patch_position(9, grid) == (1, 2)
    with pytest.raises(TilingError):
        patch_position(28, grid)
    with pytest.raises(TilingError):
        patch_index(4, 0, grid)


def test_image_dimensions_and_crops(tmp_path):
    path = tmp_path / "frame.png"
    im = Image.new("RGB", (70, 40), (0, 0, 0))
    im.paste((255, 0, 0), (10, 0, 20, 10))
    im.save(path)

    assert image_dimensions(path) == (70, 40)
    patches = crop_patches(path, GridSpec())
    assert [i for i, _ in patches] == list(range(28))
    second = Image.open(io.BytesIO(patches[1][1]))
    assert second.size == (10, 10)
    assert second.getpixel((5, 5)) == (255, 0, 0)
    assert Image.open(io.BytesIO(patches[0][1])).getpixel((5, 5)) == (0, 0, 0)


def test_unreadable_image(tmp_path):
    path = tmp_path / "broken.png"
    path.write_bytes(b"not an image")
    with pytest.raises(TilingError):
        image_dimensions(path)
