import numpy as np
import pytest

from services.exceptions import GridMismatchError, TileSiftError
from services.grid_service import (
    PaddingMode,
    PaddingSpec,
    Polyomino,
    RelevanceMask,
    ScoreMatrix,
    build_grid,
    extract_polyominoes,
    mask_from_boxes,
    pad_polyomino,
    polyomino_from_tiles,
    threshold_scores,
    window_overhead,
)


def test_build_grid_shape():
    grid = build_grid(128, 96, 16)
    assert grid.shape == (6, 8)
    assert grid.tile_count == 48
    assert grid.tile_rect(1, 2) == (32, 16, 48, 32)


@pytest.mark.parametrize("w,h,ts", [(100, 96, 16), (128, 90, 16), (0, 96, 16), (128, 96, 0)])
def test_build_grid_rejects_mismatch(w, h, ts):
    with pytest.raises(GridMismatchError):
        build_grid(w, h, ts)


def test_tile_of_point_clamps_to_grid():
    grid = build_grid(64, 64, 16)
    assert grid.tile_of_point(0, 0) == (0, 0)
    assert grid.tile_of_point(63.9, 17) == (1, 3)
    assert grid.tile_of_point(64, 64) == (3, 3)
    assert grid.tile_of_point(-5, -5) == (0, 0)


def test_threshold_is_inclusive():
    scores = ScoreMatrix(1, np.array([[0.5, 0.49], [1.0, 0.0]]))
    mask = threshold_scores(scores, 0.5)
    assert mask.relevant.tolist() == [[True, False], [True, False]]
    assert threshold_scores(scores, 0.0).count == 4


def test_score_matrix_range_checked():
    with pytest.raises(TileSiftError):
        ScoreMatrix(1, np.array([[1.2]]))


def test_extract_uses_edge_adjacency_only():
    relevant = np.array([
        [1, 0, 0, 1],
        [0, 1, 0, 1],
        [0, 0, 0, 0],
        [1, 1, 0, 0],
    ], dtype=bool)
    polys = extract_polyominoes(RelevanceMask(7, relevant))
    # the diagonal pair stays separate
    assert [p.tiles for p in polys] == [
        ((0, 0),),
        ((0, 3), (1, 3)),
        ((1, 1),),
        ((3, 0), (3, 1)),
    ]
    assert [p.index for p in polys] == [0, 1, 2, 3]
    assert all(p.frame_index == 7 for p in polys)


def test_extract_partitions_relevant_tiles():
    rng = np.random.default_rng(11)
    for _ in range(50):
        relevant = rng.random((6, 8)) < 0.4
        polys = extract_polyominoes(RelevanceMask(1, relevant))
        covered = [t for p in polys for t in p.tiles]
        assert len(covered) == len(set(covered)) == int(relevant.sum())
        assert set(covered) == {tuple(t) for t in np.argwhere(relevant).tolist()}


def test_extract_empty_mask():
    assert extract_polyominoes(RelevanceMask(1, np.zeros((3, 3), dtype=bool))) == []


def test_polyomino_geometry():
    p = Polyomino(1, ((2, 3), (1, 3), (2, 4)))
    assert p.tiles == ((1, 3), (2, 3), (2, 4))
    assert p.anchor == (1, 3)
    assert (p.height, p.width) == (2, 2)
    assert p.shape.tolist() == [[True, False], [True, True]]
    assert window_overhead(p) == pytest.approx(1 / 3)


def test_polyomino_from_tiles_validates_connectivity():
    grid = build_grid(64, 64, 16)
    polyomino_from_tiles(1, [(0, 0), (0, 1), (1, 1)], grid)
    with pytest.raises(TileSiftError):
        polyomino_from_tiles(1, [(0, 0), (1, 1)], grid)
    with pytest.raises(TileSiftError):
        polyomino_from_tiles(1, [(0, 0), (0, 4)], grid)
    with pytest.raises(TileSiftError):
        polyomino_from_tiles(1, [], grid)


def test_mask_from_boxes_uses_positive_area_overlap():
    grid = build_grid(64, 64, 16)
    # touches the tile boundary at x=32 without entering tile column 2
    mask = mask_from_boxes([(20.0, 4.0, 32.0, 12.0)], grid)
    assert np.argwhere(mask.relevant).tolist() == [[0, 1]]
    mask = mask_from_boxes([(20.0, 4.0, 33.0, 20.0)], grid)
    assert np.argwhere(mask.relevant).tolist() == [[0, 1], [0, 2], [1, 1], [1, 2]]


def test_padding_margins():
    assert PaddingSpec(PaddingMode.NONE).margins(16) == (0, 0, 0, 0)
    assert PaddingSpec(PaddingMode.HALF_TOP_LEFT).margins(16) == (8, 8, 0, 0)
    assert PaddingSpec(PaddingMode.HALF_BOTTOM_RIGHT).margins(16) == (0, 0, 8, 8)
    assert PaddingSpec("full").margins(16) == (16, 16, 16, 16)


def test_no_padding_is_identity():
    grid = build_grid(64, 64, 16)
    p = Polyomino(1, ((1, 1), (1, 2)))
    padded = pad_polyomino(p, PaddingSpec(), grid)
    assert padded.occupancy == p.tiles
    assert padded.pixel_mask.all()
    assert padded.pixel_mask.shape == (16, 32)


def test_full_padding_grows_and_clips():
    grid = build_grid(64, 64, 16)
    padded = pad_polyomino(Polyomino(1, ((0, 0),)), PaddingSpec(PaddingMode.FULL), grid)
    assert padded.occupancy == ((0, 0), (0, 1), (1, 0), (1, 1))
    assert padded.pixel_origin() == (0, 0)
    assert padded.pixel_mask.shape == (32, 32)
    assert padded.pixel_mask.all()
    assert padded.core == frozenset({(0, 0)})


def test_half_padding_covers_partial_tiles():
    grid = build_grid(64, 64, 16)
    padded = pad_polyomino(Polyomino(1, ((1, 1),)), PaddingSpec(PaddingMode.HALF_TOP_LEFT), grid)
    assert padded.occupancy == ((0, 0), (0, 1), (1, 0), (1, 1))
    mask = padded.pixel_mask
    assert mask.shape == (32, 32)
    # pixels from (8, 8) to (32, 32) are part of the footprint
    assert mask[8:, 8:].all()
    assert not mask[:8, :].any()
    assert not mask[:, :8].any()
