"""
Tile grid model - tiles, relevance masks, polyominoes and padding.

A frame of W_F x H_F pixels is cut into square tiles of TS pixels. Relevant
tiles that share an edge form a polyomino, the unit the pruner selects and the
packer places.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import GridMismatchError, TileSiftError

logger = logging.getLogger(__name__)

Tile = Tuple[int, int]
Box = Tuple[float, float, float, float]

# Edge adjacency only; diagonal neighbours stay separate.
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class TileGrid:
    frame_width: int
    frame_height: int
    tile_size: int

    @property
    def cols(self) -> int:
        return self.frame_width // self.tile_size

    @property
    def rows(self) -> int:
        return self.frame_height // self.tile_size

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def tile_count(self) -> int:
        return self.rows * self.cols

    def tile_rect(self, i: int, j: int) -> Tuple[int, int, int, int]:
        """Pixel rectangle (x1, y1, x2, y2) of tile (i, j), end-exclusive"""
        ts = self.tile_size
        return (j * ts, i * ts, (j + 1) * ts, (i + 1) * ts)

    def tile_of_point(self, x: float, y: float) -> Tile:
        """Tile containing pixel coordinate (x, y), clamped to the grid"""
        i = min(max(int(math.floor(y / self.tile_size)), 0), self.rows - 1)
        j = min(max(int(math.floor(x / self.tile_size)), 0), self.cols - 1)
        return (i, j)

    def contains(self, tile: Tile) -> bool:
        return 0 <= tile[0] < self.rows and 0 <= tile[1] < self.cols


def build_grid(frame_width: int, frame_height: int, tile_size: int) -> TileGrid:
    """Build the tile lattice; frame sizes must be exact multiples of the tile size."""
    if min(frame_width, frame_height, tile_size) < 1:
        raise GridMismatchError(
            "grid mismatch: dimensions must be positive",
            details={"frame_width": frame_width, "frame_height": frame_height, "tile_size": tile_size},
        )
    if frame_width % tile_size or frame_height % tile_size:
        raise GridMismatchError(
            f"grid mismatch: {frame_width}x{frame_height} is not divisible by tile size {tile_size}",
            details={"frame_width": frame_width, "frame_height": frame_height, "tile_size": tile_size},
        )
    return TileGrid(frame_width, frame_height, tile_size)


@dataclass(frozen=True)
class ScoreMatrix:
    frame_index: int
    scores: np.ndarray

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise TileSiftError("score matrix must be two-dimensional", details={"shape": scores.shape})
        if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
            raise TileSiftError("relevance scores must lie in [0, 1]", details={"frame": self.frame_index})
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)


@dataclass(frozen=True)
class RelevanceMask:
    frame_index: int
    relevant: np.ndarray

    def __post_init__(self):
        relevant = np.array(self.relevant, dtype=bool)
        relevant.setflags(write=False)
        object.__setattr__(self, "relevant", relevant)

    @property
    def count(self) -> int:
        return int(self.relevant.sum())


def threshold_scores(scores: ScoreMatrix, relevance_threshold: float) -> RelevanceMask:
    """A tile is relevant when its score is at least the threshold (inclusive)."""
    return RelevanceMask(scores.frame_index, scores.scores >= relevance_threshold)


@dataclass(frozen=True)
class Polyomino:
    frame_index: int
    tiles: Tuple[Tile, ...]
    index: int = 0

    def __post_init__(self):
        tiles = tuple(sorted((int(i), int(j)) for i, j in self.tiles))
        object.__setattr__(self, "tiles", tiles)

    @property
    def size(self) -> int:
        return len(self.tiles)

    @cached_property
    def bbox(self) -> Tuple[int, int, int, int]:
        """(min_row, min_col, max_row, max_col), inclusive"""
        rows = [t[0] for t in self.tiles]
        cols = [t[1] for t in self.tiles]
        return (min(rows), min(cols), max(rows), max(cols))

    @property
    def anchor(self) -> Tile:
        return (self.bbox[0], self.bbox[1])

    @property
    def height(self) -> int:
        return self.bbox[2] - self.bbox[0] + 1

    @property
    def width(self) -> int:
        return self.bbox[3] - self.bbox[1] + 1

    @cached_property
    def tile_set(self) -> frozenset:
        return frozenset(self.tiles)

    @cached_property
    def shape(self) -> np.ndarray:
        """Occupancy mask relative to the anchor"""
        mask = np.zeros((self.height, self.width), dtype=bool)
        r0, c0 = self.anchor
        for i, j in self.tiles:
            mask[i - r0, j - c0] = True
        mask.setflags(write=False)
        return mask

    def covers(self, i: int, j: int) -> bool:
        return (i, j) in self.tile_set


def polyomino_from_tiles(frame_index: int, tiles: Iterable[Tile], grid: Optional[TileGrid] = None,
                         index: int = 0) -> Polyomino:
    """Build a polyomino, checking it is nonempty, duplicate-free, in bounds and 4-connected"""
    tile_list = [(int(i), int(j)) for i, j in tiles]
    if not tile_list:
        raise TileSiftError("polyomino must contain at least one tile")
    if len(set(tile_list)) != len(tile_list):
        raise TileSiftError("polyomino tiles must be distinct", details={"tiles": tile_list})
    if grid is not None and not all(grid.contains(t) for t in tile_list):
        raise TileSiftError("polyomino tile outside the grid", details={"tiles": tile_list})

    poly = Polyomino(frame_index, tuple(tile_list), index)
    _, components = ndimage.label(poly.shape, structure=FOUR_CONNECTED)
    if components != 1:
        raise TileSiftError("polyomino tiles are not edge-connected", details={"tiles": tile_list})
    return poly


def extract_polyominoes(mask: RelevanceMask) -> List[Polyomino]:
    """
    Split the relevant tiles of one frame into maximal 4-connected polyominoes.

    Output is ordered by anchor (row, then column), then by first tile, and
    each polyomino's index is its position in that order.
    """
    if not mask.relevant.any():
        return []
    labels, count = ndimage.label(mask.relevant, structure=FOUR_CONNECTED)
    groups = []
    for label in range(1, count + 1):
        coords = np.argwhere(labels == label)
        tiles = tuple((int(i), int(j)) for i, j in coords)
        groups.append(Polyomino(mask.frame_index, tiles))
    groups.sort(key=lambda p: (p.anchor, p.tiles[0]))
    return [Polyomino(p.frame_index, p.tiles, k) for k, p in enumerate(groups)]


def mask_from_boxes(boxes: Iterable[Box], grid: TileGrid, frame_index: int = 0) -> RelevanceMask:
    """Mark every tile that a box overlaps with positive area"""
    relevant = np.zeros(grid.shape, dtype=bool)
    ts = grid.tile_size
    for x1, y1, x2, y2 in boxes:
        x1, y1 = max(x1, 0.0), max(y1, 0.0)
        x2, y2 = min(x2, float(grid.frame_width)), min(y2, float(grid.frame_height))
        if x2 <= x1 or y2 <= y1:
            continue
        c0, c1 = int(math.floor(x1 / ts)), int(math.ceil(x2 / ts))
        r0, r1 = int(math.floor(y1 / ts)), int(math.ceil(y2 / ts))
        relevant[r0:r1, c0:c1] = True
    return RelevanceMask(frame_index, relevant)


def window_overhead(p: Polyomino) -> float:
    """Extra tiles an axis-aligned window adds, relative to the polyomino size"""
    bbox_area = p.height * p.width
    return (bbox_area - p.size) / p.size


class PaddingMode(str, Enum):
    NONE = "none"
    HALF_TOP_LEFT = "half-top-left"
    HALF_BOTTOM_RIGHT = "half-bottom-right"
    FULL = "full"


# Margin as a fraction of the tile size, and the sides it applies to (top, left, bottom, right)
_PADDING_RULES = {
    PaddingMode.NONE: (0.0, (False, False, False, False)),
    PaddingMode.HALF_TOP_LEFT: (0.5, (True, True, False, False)),
    PaddingMode.HALF_BOTTOM_RIGHT: (0.5, (False, False, True, True)),
    PaddingMode.FULL: (1.0, (True, True, True, True)),
}


@dataclass(frozen=True)
class PaddingSpec:
    mode: PaddingMode = PaddingMode.NONE

    def __post_init__(self):
        object.__setattr__(self, "mode", PaddingMode(self.mode))

    def margins(self, tile_size: int) -> Tuple[int, int, int, int]:
        """Pixel margins (top, left, bottom, right)"""
        fraction, sides = _PADDING_RULES[self.mode]
        margin = int(math.floor(fraction * tile_size))
        return tuple(margin if side else 0 for side in sides)


@dataclass(frozen=True)
class PaddedPolyomino:
    polyomino: Polyomino
    occupancy: Tuple[Tile, ...]
    pixel_mask: np.ndarray = field(repr=False)
    tile_size: int

    @property
    def frame_index(self) -> int:
        return self.polyomino.frame_index

    @property
    def index(self) -> int:
        return self.polyomino.index

    @property
    def core(self) -> frozenset:
        return self.polyomino.tile_set

    @property
    def size(self) -> int:
        return len(self.occupancy)

    @cached_property
    def bbox(self) -> Tuple[int, int, int, int]:
        rows = [t[0] for t in self.occupancy]
        cols = [t[1] for t in self.occupancy]
        return (min(rows), min(cols), max(rows), max(cols))

    @property
    def anchor(self) -> Tile:
        return (self.bbox[0], self.bbox[1])

    @property
    def height(self) -> int:
        return self.bbox[2] - self.bbox[0] + 1

    @property
    def width(self) -> int:
        return self.bbox[3] - self.bbox[1] + 1

    @cached_property
    def shape(self) -> np.ndarray:
        mask = np.zeros((self.height, self.width), dtype=bool)
        r0, c0 = self.anchor
        for i, j in self.occupancy:
            mask[i - r0, j - c0] = True
        mask.setflags(write=False)
        return mask

    def pixel_origin(self) -> Tuple[int, int]:
        """Frame pixel (x, y) of the occupancy bbox's top-left corner"""
        return (self.anchor[1] * self.tile_size, self.anchor[0] * self.tile_size)


def pad_polyomino(p: Polyomino, spec: PaddingSpec, grid: TileGrid) -> PaddedPolyomino:
    """
    Grow every member tile by the padding margin on its designated sides,
    clip to the frame, and take the tiles the padded footprint touches as the
    new occupancy.
    """
    ts = grid.tile_size
    top, left, bottom, right = spec.margins(ts)
    rects = []
    occupancy = set()
    for i, j in p.tiles:
        x1, y1, x2, y2 = grid.tile_rect(i, j)
        x1, y1 = max(x1 - left, 0), max(y1 - top, 0)
        x2, y2 = min(x2 + right, grid.frame_width), min(y2 + bottom, grid.frame_height)
        rects.append((x1, y1, x2, y2))
        for r in range(y1 // ts, -(-y2 // ts)):
            for c in range(x1 // ts, -(-x2 // ts)):
                occupancy.add((r, c))

    occ = tuple(sorted(occupancy))
    r0 = min(t[0] for t in occ)
    c0 = min(t[1] for t in occ)
    r1 = max(t[0] for t in occ)
    c1 = max(t[1] for t in occ)
    pixel_mask = np.zeros(((r1 - r0 + 1) * ts, (c1 - c0 + 1) * ts), dtype=bool)
    ox, oy = c0 * ts, r0 * ts
    for x1, y1, x2, y2 in rects:
        pixel_mask[y1 - oy:y2 - oy, x1 - ox:x2 - ox] = True
    pixel_mask.setflags(write=False)
    return PaddedPolyomino(p, occ, pixel_mask, ts)
