"""
Synthetic stationary-camera scenes.

Stands in for real video and neural models: frames are rasterised with
Pillow, ground truth comes from object waypoints, and the detector and
relevance classifier are oracles over that ground truth.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw

from schemas import ObjectSpec, Scenario
from .exceptions import FrameRangeError, TileSiftError
from .grid_service import Box, ScoreMatrix, TileGrid, build_grid, mask_from_boxes

logger = logging.getLogger(__name__)

PRESETS = ("highway", "intersection", "sparse")


@dataclass(frozen=True)
class Detection:
    frame: int
    box: Box
    object_id: Optional[int] = None
    confidence: float = 1.0

    @property
    def center(self) -> Tuple[float, float]:
        x1, y1, x2, y2 = self.box
        return ((x1 + x2) / 2.0, (y1 + y2) / 2.0)


@dataclass(frozen=True)
class Frame:
    index: int
    pixels: np.ndarray = field(repr=False)


def _check_frame(scenario: Scenario, f: int):
    if not 1 <= f <= scenario.n_frames:
        raise FrameRangeError(
            f"frame {f} outside scenario range 1..{scenario.n_frames}",
            details={"frame": f, "n_frames": scenario.n_frames},
        )


def _object_center(obj: ObjectSpec, f: int) -> Optional[Tuple[float, float]]:
    """Centre at frame f, linearly interpolated between waypoints; None when absent"""
    if f < obj.first_frame or f > obj.last_frame:
        return None
    frames = [w[0] for w in obj.waypoints]
    xs = [w[1] for w in obj.waypoints]
    ys = [w[2] for w in obj.waypoints]
    return (float(np.interp(f, frames, xs)), float(np.interp(f, frames, ys)))


def _snap(v: float) -> int:
    return int(math.floor(v + 0.5))


def object_box(obj: ObjectSpec, f: int, frame_w: int, frame_h: int) -> Optional[Box]:
    """Pixel-aligned box of obj at frame f, clipped to the frame"""
    center = _object_center(obj, f)
    if center is None:
        return None
    cx, cy = center
    x1 = _snap(cx - obj.w / 2.0)
    y1 = _snap(cy - obj.h / 2.0)
    x2, y2 = x1 + obj.w, y1 + obj.h
    x1, y1 = max(x1, 0), max(y1, 0)
    x2, y2 = min(x2, frame_w), min(y2, frame_h)
    if x2 <= x1 or y2 <= y1:
        return None
    return (float(x1), float(y1), float(x2), float(y2))


def ground_truth_boxes(scenario: Scenario, f: int) -> List[Detection]:
    _check_frame(scenario, f)
    detections = []
    for obj in scenario.objects:
        box = object_box(obj, f, scenario.frame_w, scenario.frame_h)
        if box is not None:
            detections.append(Detection(f, box, obj.id, 1.0))
    return detections


def _background(scenario: Scenario) -> np.ndarray:
    rng = np.random.default_rng(scenario.seed)
    texture = rng.integers(0, 6, size=(scenario.frame_h, scenario.frame_w))
    return np.clip(scenario.background + texture, 0, 255).astype(np.uint8)


def _draw_frame(scenario: Scenario, f: int, background: np.ndarray) -> Frame:
    image = Image.fromarray(background, mode="L")
    draw = ImageDraw.Draw(image)
    for obj in scenario.objects:
        box = object_box(obj, f, scenario.frame_w, scenario.frame_h)
        if box is None:
            continue
        x1, y1, x2, y2 = (int(v) for v in box)
        # Pillow rectangles include their end coordinates
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], fill=obj.intensity)
    return Frame(f, np.asarray(image, dtype=np.uint8))


def synthesize_frame(scenario: Scenario, f: int) -> Frame:
    """Static textured background with every present object drawn as a filled rectangle"""
    _check_frame(scenario, f)
    return _draw_frame(scenario, f, _background(scenario))


def oracle_relevance(scenario: Scenario, f: int, grid: TileGrid) -> ScoreMatrix:
    """1.0 on every tile a ground-truth box overlaps with positive area"""
    boxes = [d.box for d in ground_truth_boxes(scenario, f)]
    mask = mask_from_boxes(boxes, grid, f)
    return ScoreMatrix(f, mask.relevant.astype(np.float64))


def tile_means(values: np.ndarray, grid: TileGrid) -> np.ndarray:
    """Mean of a pixel array over each tile"""
    ts = grid.tile_size
    return values.reshape(grid.rows, ts, grid.cols, ts).mean(axis=(1, 3))


def motion_relevance(prev: Optional[Frame], cur: Frame, grid: TileGrid, position_prior: np.ndarray,
                     noise_seed: Optional[int] = None, noise_amplitude: float = 0.0,
                     saturation: float = 32.0) -> ScoreMatrix:
    """
    Score tiles by mean absolute frame difference weighted by a position prior.

    With no previous frame the difference image is zero. Noise is added only
    when both a seed and a positive amplitude are given.
    """
    if prev is not None and prev.pixels.shape != cur.pixels.shape:
        raise TileSiftError("frames differ in size", details={"prev": prev.pixels.shape, "cur": cur.pixels.shape})
    if prev is None:
        delta = np.zeros(cur.pixels.shape, dtype=np.float64)
    else:
        delta = np.abs(cur.pixels.astype(np.int16) - prev.pixels.astype(np.int16)).astype(np.float64)

    scores = tile_means(delta, grid) / saturation * np.asarray(position_prior, dtype=np.float64)
    if noise_seed is not None and noise_amplitude > 0:
        rng = np.random.default_rng(noise_seed)
        scores = scores + noise_amplitude * rng.standard_normal(scores.shape)
    return ScoreMatrix(cur.index, np.clip(scores, 0.0, 1.0))


def learn_position_prior(scenario: Scenario, floor: float = 0.0) -> np.ndarray:
    """1.0 on tiles relevant in any frame of the sample, floor elsewhere"""
    grid = scenario.grid
    seen = np.zeros(grid.shape, dtype=bool)
    for f in range(1, scenario.n_frames + 1):
        seen |= oracle_relevance(scenario, f, grid).scores >= 1.0
    return np.where(seen, 1.0, floor)


class SceneService:
    """
    Frames, ground truth and the oracle models of one scenario.

    The background texture and each frame's ground-truth boxes are computed
    once and reused.
    """

    def __init__(self, scenario: Scenario, motion_saturation: float = 32.0):
        self.scenario = scenario
        self.grid = scenario.grid
        self.motion_saturation = motion_saturation
        self._background: Optional[np.ndarray] = None
        self._truth: Dict[int, List[Detection]] = {}

    def ground_truth(self, f: int) -> List[Detection]:
        truth = self._truth.get(f)
        if truth is None:
            truth = self._truth[f] = ground_truth_boxes(self.scenario, f)
        return truth

    def frame(self, f: int) -> Frame:
        _check_frame(self.scenario, f)
        if self._background is None:
            self._background = _background(self.scenario)
        return _draw_frame(self.scenario, f, self._background)

    def oracle_scores(self, f: int) -> ScoreMatrix:
        boxes = [d.box for d in self.ground_truth(f)]
        return ScoreMatrix(f, mask_from_boxes(boxes, self.grid, f).relevant.astype(np.float64))

    def motion_scores(self, prev: Optional[Frame], cur: Frame, position_prior: np.ndarray) -> ScoreMatrix:
        return motion_relevance(prev, cur, self.grid, position_prior, saturation=self.motion_saturation)

    def detect(self, canvas) -> List[Detection]:
        """
        Stand-in for the user's detector run on one rendered canvas.

        Emits every ground-truth box whose centre pixel lies in a placement's
        rendered footprint, translated to canvas coordinates and clipped to
        the bounding rectangle of the box pixels that placement rendered. A
        clipped box whose centre lands on a tile owned by another placement is
        not reported. Returned boxes are in canvas space; the frame field
        holds the canvas id.
        """
        layout = canvas.canvas if hasattr(canvas, "canvas") else canvas
        ts = layout.tile_size
        detections = []
        for order, placement in enumerate(layout.placements):
            padded = placement.padded
            ox, oy = padded.pixel_origin()
            dx, dy = placement.pixel_shift()
            mask = padded.pixel_mask
            mh, mw = mask.shape
            for det in self.ground_truth(padded.frame_index):
                cx, cy = det.center
                mx, my = int(math.floor(cx)) - ox, int(math.floor(cy)) - oy
                if not (0 <= my < mh and 0 <= mx < mw) or not mask[my, mx]:
                    continue
                x1, y1, x2, y2 = det.box
                bx1, by1 = max(int(math.floor(x1)) - ox, 0), max(int(math.floor(y1)) - oy, 0)
                bx2, by2 = min(int(math.ceil(x2)) - ox, mw), min(int(math.ceil(y2)) - oy, mh)
                # holds the centre pixel, so never empty
                visible = mask[by1:by2, bx1:bx2]
                rows = np.flatnonzero(visible.any(axis=1))
                cols = np.flatnonzero(visible.any(axis=0))
                box = (
                    max(x1, float(ox + bx1 + cols[0])) + dx,
                    max(y1, float(oy + by1 + rows[0])) + dy,
                    min(x2, float(ox + bx1 + cols[-1] + 1)) + dx,
                    min(y2, float(oy + by1 + rows[-1] + 1)) + dy,
                )
                if box[2] <= box[0] or box[3] <= box[1]:
                    continue
                i = min(max(int(math.floor((box[1] + box[3]) / 2.0 / ts)), 0), layout.rows - 1)
                j = min(max(int(math.floor((box[0] + box[2]) / 2.0 / ts)), 0), layout.cols - 1)
                if layout.owner[i, j] != order:
                    continue
                detections.append(Detection(layout.canvas_id, tuple(float(v) for v in box), None, 1.0))
        return detections


def oracle_detect_canvas(canvas, scenario: Scenario) -> List[Detection]:
    """Oracle detections on one rendered canvas, in canvas space"""
    return SceneService(scenario).detect(canvas)


# Preset scene families

def _lane_regions(grid: TileGrid, lane_y: float, col_range: Iterable[int]) -> List[Tuple[int, int]]:
    row = min(int(lane_y // grid.tile_size), grid.rows - 1)
    return [(row, c) for c in col_range if 0 <= c < grid.cols]


def _highway(rng: np.random.Generator, n_frames: int, w: int, h: int) -> Tuple[List[ObjectSpec], Dict]:
    """Two opposing lanes of constant-velocity vehicles"""
    objects = []
    vw, vh, speed = 24, 12, 3
    lanes = [(round(h * 0.25), 1), (round(h * 0.7), -1)]
    next_id = 1
    for lane_y, direction in lanes:
        start = int(rng.integers(1, 6))
        travel = (w - vw) // speed
        while start <= n_frames:
            x0 = vw / 2 if direction > 0 else w - vw / 2
            x1 = x0 + direction * speed * travel
            objects.append(ObjectSpec(
                id=next_id, w=vw, h=vh, intensity=int(rng.integers(150, 250)),
                waypoints=[(start, x0, lane_y), (start + travel, x1, lane_y)],
            ))
            next_id += 1
            start += int(rng.integers(14, 22))
    return objects, {}


def _intersection(rng: np.random.Generator, n_frames: int, w: int, h: int, grid: TileGrid) -> Tuple[List[ObjectSpec], Dict]:
    """
    An eastbound approach lane where vehicles brake hard at a stop line and
    pull away again, and a westbound exit lane of slow steady vehicles that
    emerge near the centre of the frame.
    """
    vw, vh = 16, 12
    approach_y = round(h * 0.58)
    exit_y = round(h * 0.25)
    stop_x = round(w * 0.45)
    spawn_x = round(w * 0.56)
    objects = []
    next_id = 1

    start = int(rng.integers(1, 4))
    while start <= n_frames:
        x0 = vw / 2
        run_in = max(1, int(math.ceil((stop_x - x0) / 5.0)))
        wait = int(rng.integers(4, 9))
        end_x = w - vw / 2
        run_out = max(1, int(math.ceil((end_x - stop_x) / 4.0)))
        objects.append(ObjectSpec(
            id=next_id, w=vw, h=vh, intensity=int(rng.integers(150, 250)),
            waypoints=[
                (start, x0, approach_y),
                (start + run_in, stop_x, approach_y),
                (start + run_in + wait, stop_x, approach_y),
                (start + run_in + wait + run_out, end_x, approach_y),
            ],
        ))
        next_id += 1
        start += int(rng.integers(14, 21))

    start = int(rng.integers(1, 6))
    while start <= n_frames:
        end_x = vw / 2
        duration = max(1, int(round((spawn_x - end_x) / 1.5)))
        objects.append(ObjectSpec(
            id=next_id, w=vw, h=vh, intensity=int(rng.integers(150, 250)),
            waypoints=[(start, spawn_x, exit_y), (start + duration, end_x, exit_y)],
        ))
        next_id += 1
        start += int(rng.integers(16, 23))

    ts = grid.tile_size
    stop_col = int((stop_x + vw // 2 - 1) // ts)
    spawn_first_col = int((spawn_x - vw // 2) // ts)
    regions = {
        "approach": _lane_regions(grid, approach_y, range(0, stop_col + 1)),
        "exit": _lane_regions(grid, exit_y, range(0, spawn_first_col)),
    }
    return objects, regions


def _sparse(rng: np.random.Generator, n_frames: int, w: int, h: int) -> Tuple[List[ObjectSpec], Dict]:
    """One small object at a time crossing a single tile row"""
    size, speed = 8, 2
    lane_y = round(h * 0.42)
    objects = []
    start = int(rng.integers(1, 10))
    next_id = 1
    travel = (w - size) // speed
    while start <= n_frames:
        objects.append(ObjectSpec(
            id=next_id, w=size, h=size, intensity=int(rng.integers(150, 250)),
            waypoints=[(start, size / 2, lane_y), (start + travel, size / 2 + speed * travel, lane_y)],
        ))
        next_id += 1
        start += travel + int(rng.integers(5, 15))
    return objects, {}


def build_preset(name: str, seed: int = 0, n_frames: int = 120, frame_size: Tuple[int, int] = (128, 96),
                 tile_size: int = 16) -> Scenario:
    """Build one of the canonical scene families; deterministic per seed"""
    if name not in PRESETS:
        raise TileSiftError(f"unknown preset '{name}'", details={"presets": list(PRESETS)})
    if n_frames < 1:
        raise TileSiftError("scenario needs at least one frame", details={"n_frames": n_frames})
    w, h = frame_size
    grid = build_grid(w, h, tile_size)
    rng = np.random.default_rng(seed)

    if name == "highway":
        objects, regions = _highway(rng, n_frames, w, h)
    elif name == "intersection":
        objects, regions = _intersection(rng, n_frames, w, h, grid)
    else:
        objects, regions = _sparse(rng, n_frames, w, h)

    logger.info(f"Built '{name}' scenario: {len(objects)} objects over {n_frames} frames (seed {seed})")
    return Scenario(
        seed=seed, frame_w=w, frame_h=h, tile_size=tile_size, n_frames=n_frames,
        preset=name, objects=objects, regions=regions,
    )
