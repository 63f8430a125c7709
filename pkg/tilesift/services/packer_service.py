import logging
import math
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from schemas import CanvasManifest, PlacementRecord
from .exceptions import PackingError, RenderError
from .grid_service import PaddedPolyomino, PaddingSpec, Polyomino, TileGrid, pad_polyomino
from .scene_service import Detection

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Placement:
    padded: PaddedPolyomino
    offset: Tuple[int, int]  # canvas (row, col) of the occupancy anchor

    @property
    def frame_index(self) -> int:
        return self.padded.frame_index

    @property
    def poly_index(self) -> int:
        return self.padded.index

    def translated(self) -> List[Tuple[int, int]]:
        r0, c0 = self.padded.anchor
        return [(i - r0 + self.offset[0], j - c0 + self.offset[1]) for i, j in self.padded.occupancy]

    def pixel_shift(self) -> Tuple[int, int]:
        """(dx, dy) taking frame pixels to canvas pixels"""
        ts = self.padded.tile_size
        r0, c0 = self.padded.anchor
        return ((self.offset[1] - c0) * ts, (self.offset[0] - r0) * ts)


@dataclass
class Canvas:
    canvas_id: int
    rows: int
    cols: int
    tile_size: int
    occupancy: np.ndarray = field(repr=False)
    owner: np.ndarray = field(repr=False)  # placement index per tile, -1 when free
    placements: List[Placement] = field(default_factory=list)

    @classmethod
    def empty(cls, canvas_id: int, rows: int, cols: int, tile_size: int) -> "Canvas":
        return cls(canvas_id, rows, cols, tile_size,
                   np.zeros((rows, cols), dtype=bool), np.full((rows, cols), -1, dtype=np.int64))

    @property
    def occupied(self) -> int:
        return int(self.occupancy.sum())

    def fits(self, shape: np.ndarray, r: int, c: int) -> bool:
        ph, pw = shape.shape
        return not np.any(self.occupancy[r:r + ph, c:c + pw] & shape)

    def place(self, padded: PaddedPolyomino, r: int, c: int) -> Placement:
        placement = Placement(padded, (r, c))
        ph, pw = padded.shape.shape
        window = self.occupancy[r:r + ph, c:c + pw]
        window |= padded.shape
        self.owner[r:r + ph, c:c + pw][padded.shape] = len(self.placements)
        self.placements.append(placement)
        return placement

    def to_manifest(self) -> CanvasManifest:
        return CanvasManifest(
            canvas_id=self.canvas_id,
            placements=[PlacementRecord(frame=p.frame_index, poly_index=p.poly_index, offset=p.offset)
                        for p in self.placements],
        )


@dataclass
class RenderedCanvas:
    canvas: Canvas
    pixels: np.ndarray = field(repr=False)


@dataclass
class PackStats:
    attempts: int = 0
    placements: int = 0
    canvases: int = 0


def unpadded(p: Polyomino, tile_size: int = 1) -> PaddedPolyomino:
    """Identity padding without needing a grid"""
    ts = tile_size
    r0, c0 = p.anchor
    mask = np.zeros((p.height * ts, p.width * ts), dtype=bool)
    for i, j in p.tiles:
        mask[(i - r0) * ts:(i - r0 + 1) * ts, (j - c0) * ts:(j - c0 + 1) * ts] = True
    mask.setflags(write=False)
    return PaddedPolyomino(p, p.tiles, mask, ts)


def ffd_order(items: Sequence[PaddedPolyomino]) -> List[PaddedPolyomino]:
    """Size descending, ties by frame then index"""
    return sorted(items, key=lambda p: (-p.size, p.frame_index, p.index))


def _try_place(canvas: Canvas, shape: np.ndarray, stats: PackStats) -> Optional[Tuple[int, int]]:
    ph, pw = shape.shape
    for r in range(canvas.rows - ph + 1):
        for c in range(canvas.cols - pw + 1):
            stats.attempts += 1
            if canvas.fits(shape, r, c):
                return (r, c)
    return None


def pack(polyominoes: Sequence[Union[Polyomino, PaddedPolyomino]], h: int, w: int,
         stats: Optional[PackStats] = None, first_canvas_id: int = 0) -> List[Canvas]:
    """
    First-fit descending: each polyomino goes to the first canvas (in creation
    order) and first row-major offset where it does not overlap; when nothing
    fits a new canvas is opened with the polyomino at (0, 0).
    """
    stats = stats if stats is not None else PackStats()
    items = [p if isinstance(p, PaddedPolyomino) else unpadded(p) for p in polyominoes]
    canvases: List[Canvas] = []
    for item in ffd_order(items):
        if item.height > h or item.width > w:
            raise PackingError(
                f"polyomino {item.height}x{item.width} exceeds canvas {h}x{w}",
                details={"frame": item.frame_index, "index": item.index},
            )
        placed = False
        for canvas in canvases:
            position = _try_place(canvas, item.shape, stats)
            if position is not None:
                canvas.place(item, *position)
                placed = True
                break
        if not placed:
            canvas = Canvas.empty(first_canvas_id + len(canvases), h, w, item.tile_size)
            canvases.append(canvas)
            canvas.place(item, 0, 0)
            stats.canvases += 1
        stats.placements += 1
    return canvases


def packing_efficacy(canvases: Sequence[Canvas]) -> float:
    """Occupied tile-cells over all canvas tile-cells"""
    if not canvases:
        raise PackingError("packing efficacy is undefined without canvases")
    cells = sum(c.rows * c.cols for c in canvases)
    return sum(c.occupied for c in canvases) / cells


def render(canvas: Canvas, frames: Mapping[int, object]) -> RenderedCanvas:
    """Copy each placement's padded pixel footprint from its source frame"""
    ts = canvas.tile_size
    out = None
    for placement in canvas.placements:
        f = placement.frame_index
        if f not in frames:
            raise RenderError(f"source frame {f} is not available", details={"canvas": canvas.canvas_id})
        source = np.asarray(getattr(frames[f], "pixels", frames[f]))
        if out is None:
            out = np.zeros((canvas.rows * ts, canvas.cols * ts), dtype=source.dtype)
        mask = placement.padded.pixel_mask
        mh, mw = mask.shape
        ox, oy = placement.padded.pixel_origin()
        dx, dy = placement.pixel_shift()
        region = source[oy:oy + mh, ox:ox + mw]
        target = out[oy + dy:oy + dy + mh, ox + dx:ox + dx + mw]
        target[mask] = region[mask]
    if out is None:
        out = np.zeros((canvas.rows * ts, canvas.cols * ts), dtype=np.uint8)
    return RenderedCanvas(canvas, out)


def unpack_detailed(detections: Sequence[Detection], canvas: Canvas) -> List[Tuple[Detection, Placement]]:
    ts = canvas.tile_size
    results = []
    for det in detections:
        cx, cy = det.center
        i = min(max(int(math.floor(cy / ts)), 0), canvas.rows - 1)
        j = min(max(int(math.floor(cx / ts)), 0), canvas.cols - 1)
        owner = canvas.owner[i, j]
        if owner < 0:
            continue
        placement = canvas.placements[owner]
        dx, dy = placement.pixel_shift()
        x1, y1, x2, y2 = det.box
        box = (x1 - dx, y1 - dy, x2 - dx, y2 - dy)
        results.append((Detection(placement.frame_index, box, det.object_id, det.confidence), placement))
    return results


def unpack(detections: Sequence[Detection], canvas: Canvas, grid: Optional[TileGrid] = None) -> List[Detection]:
    """
    Map canvas-space boxes back to their source frames through the placement
    occupying the box-centre tile; boxes centred on free tiles are dropped.
    """
    if grid is not None and (grid.rows, grid.cols) != (canvas.rows, canvas.cols):
        raise PackingError("canvas does not match the grid", details={"grid": grid.shape})
    return [det for det, _ in unpack_detailed(detections, canvas)]


class PackerService:
    """
    Pads and packs the polyominoes of successive windows onto canvases of one
    grid. Canvas ids keep counting across windows and every packed canvas is
    kept for the run's packing statistics.
    """

    def __init__(self, grid: TileGrid, padding: Optional[PaddingSpec] = None):
        self.grid = grid
        self.padding = padding or PaddingSpec()
        self.stats = PackStats()
        self.canvases: List[Canvas] = []

    def pack_window(self, polyominoes: Sequence[Polyomino]) -> List[Canvas]:
        padded = [pad_polyomino(p, self.padding, self.grid) for p in polyominoes]
        canvases = pack(padded, self.grid.rows, self.grid.cols, self.stats, first_canvas_id=len(self.canvases))
        self.canvases.extend(canvases)
        logger.debug(f"Packed {len(padded)} polyominoes onto {len(canvases)} canvases")
        return canvases

    def render(self, canvas: Canvas, frames: Mapping[int, object]) -> RenderedCanvas:
        return render(canvas, frames)

    def unpack(self, detections: Sequence[Detection], canvas: Canvas) -> List[Tuple[Detection, Placement]]:
        return unpack_detailed(detections, canvas)

    @property
    def efficacy(self) -> float:
        """Packing efficacy over every canvas so far, 0.0 before the first"""
        return packing_efficacy(self.canvases) if self.canvases else 0.0
