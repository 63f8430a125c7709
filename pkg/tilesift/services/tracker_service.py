import csv
import importlib
import io
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
from filterpy.kalman import KalmanFilter
from scipy.optimize import linear_sum_assignment

from config import get_settings
from schemas import Scenario
from .exceptions import ConfigError, TileSiftError, TrackerOrderError
from .grid_service import Box
from .scene_service import Detection, ground_truth_boxes

logger = logging.getLogger(__name__)

TRACKERS = ("sort", "user")


class TrackRow(NamedTuple):
    frame: int
    track_id: int
    box: Box


@dataclass
class Track:
    track_id: int
    observations: List[Tuple[int, Box]] = field(default_factory=list)

    @property
    def frames(self) -> List[int]:
        return [f for f, _ in self.observations]


@dataclass(frozen=True)
class TrackerConfig:
    max_age: int = 3  # frames a track survives unmatched
    min_hits: int = 1
    iou_threshold: float = 0.3

    def __post_init__(self):
        if self.max_age < 1 or self.min_hits < 1:
            raise ConfigError("max_age and min_hits must be at least 1",
                              details={"max_age": self.max_age, "min_hits": self.min_hits})
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ConfigError("iou_threshold must lie in [0, 1]", details={"iou_threshold": self.iou_threshold})


def iou(a: Box, b: Box) -> float:
    xx1, yy1 = max(a[0], b[0]), max(a[1], b[1])
    xx2, yy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, xx2 - xx1) * max(0.0, yy2 - yy1)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(boxes_a: Sequence[Box], boxes_b: Sequence[Box]) -> np.ndarray:
    matrix = np.zeros((len(boxes_a), len(boxes_b)), dtype=np.float64)
    for r, a in enumerate(boxes_a):
        for c, b in enumerate(boxes_b):
            matrix[r, c] = iou(a, b)
    return matrix


def hungarian(cost: np.ndarray) -> List[Tuple[int, int]]:
    """Min-cost maximum matching; pairs ordered by row"""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return sorted((int(r), int(c)) for r, c in zip(rows, cols))


def canonical_order(detections: Iterable[Detection]) -> List[Detection]:
    """Order detections by box so tracker input never depends on discovery order"""
    return sorted(detections, key=lambda d: (d.box, d.object_id if d.object_id is not None else -1))


def box_to_z(box: Box) -> np.ndarray:
    """(x1, y1, x2, y2) -> (cx, cy, area, aspect)"""
    w = box[2] - box[0]
    h = box[3] - box[1]
    return np.array([box[0] + w / 2.0, box[1] + h / 2.0, w * h, w / float(h)]).reshape((4, 1))


def x_to_box(x: np.ndarray) -> Box:
    area = max(float(x[2, 0]), 0.0)
    w = float(np.sqrt(area * max(float(x[3, 0]), 0.0)))
    h = area / w if w > 0 else 0.0
    cx, cy = float(x[0, 0]), float(x[1, 0])
    return (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def transition_for_gap(F: np.ndarray, Q: np.ndarray, gap: int) -> Tuple[np.ndarray, np.ndarray]:
    """F^gap and the process noise accumulated over gap single steps"""
    F_gap = np.linalg.matrix_power(F, gap)
    Q_gap = np.zeros_like(Q)
    F_k = np.eye(F.shape[0])
    for _ in range(gap):
        Q_gap = Q_gap + F_k @ Q @ F_k.T
        F_k = F @ F_k
    return F_gap, Q_gap


class KalmanBoxTrack:
    """Constant-velocity box state: (cx, cy, area, aspect) plus velocities of the first three"""

    def __init__(self, box: Box, track_id: int, frame: int):
        self.kf = KalmanFilter(dim_x=7, dim_z=4)
        self.kf.F = np.array([[1, 0, 0, 0, 1, 0, 0],
                              [0, 1, 0, 0, 0, 1, 0],
                              [0, 0, 1, 0, 0, 0, 1],
                              [0, 0, 0, 1, 0, 0, 0],
                              [0, 0, 0, 0, 1, 0, 0],
                              [0, 0, 0, 0, 0, 1, 0],
                              [0, 0, 0, 0, 0, 0, 1]], dtype=np.float64)
        self.kf.H = np.array([[1, 0, 0, 0, 0, 0, 0],
                              [0, 1, 0, 0, 0, 0, 0],
                              [0, 0, 1, 0, 0, 0, 0],
                              [0, 0, 0, 1, 0, 0, 0]], dtype=np.float64)
        self.kf.R[2:, 2:] *= 10.0
        self.kf.P[4:, 4:] *= 1000.0  # unobserved velocities start uncertain
        self.kf.P *= 10.0
        self.kf.Q[-1, -1] *= 0.01
        self.kf.Q[4:, 4:] *= 0.01
        self.kf.x[:4] = box_to_z(box)
        self.track_id = track_id
        self.last_update = frame
        self.hits = 1

    def predict(self, gap: int = 1) -> Box:
        if self.kf.x[6, 0] * gap + self.kf.x[2, 0] <= 0:
            self.kf.x[6, 0] = 0.0
        F_gap, Q_gap = transition_for_gap(self.kf.F, self.kf.Q, gap)
        self.kf.predict(F=F_gap, Q=Q_gap)
        return x_to_box(self.kf.x)

    def update(self, box: Box, frame: int):
        self.kf.update(box_to_z(box))
        self.last_update = frame
        self.hits += 1


class Tracker(Protocol):
    def step(self, detections: Sequence[Detection], frame: int) -> List[TrackRow]:
        ...


class _TrackerBase:
    """Frame bookkeeping and lifecycle shared by the built-in trackers"""

    def __init__(self, cfg: Optional[TrackerConfig] = None):
        self.cfg = cfg or TrackerConfig()
        self.tracks = []
        self.last_frame: Optional[int] = None
        self._next_id = 1

    def _advance(self, frame: int) -> int:
        if self.last_frame is not None and frame <= self.last_frame:
            raise TrackerOrderError(
                f"frame {frame} does not follow {self.last_frame}",
                details={"frame": frame, "last_frame": self.last_frame},
            )
        gap = 1 if self.last_frame is None else frame - self.last_frame
        self.last_frame = frame
        return gap

    def _new_id(self) -> int:
        track_id = self._next_id
        self._next_id += 1
        return track_id

    def _retire(self, frame: int):
        self.tracks = [t for t in self.tracks if frame - t.last_update <= self.cfg.max_age]


class SortTracker(_TrackerBase):
    """SORT: Kalman prediction over the elapsed gap, IoU-gated Hungarian association"""

    def step(self, detections: Sequence[Detection], frame: int) -> List[TrackRow]:
        gap = self._advance(frame)
        predicted = []
        alive = []
        for track in self.tracks:
            box = track.predict(gap)
            if np.any(np.isnan(box)):
                continue
            alive.append(track)
            predicted.append(box)
        self.tracks = alive

        det_boxes = [d.box for d in detections]
        overlaps = iou_matrix(det_boxes, predicted)
        matches = []
        if overlaps.size:
            matches = [(d, t) for d, t in hungarian(-overlaps) if overlaps[d, t] >= self.cfg.iou_threshold]
        matched_dets = {d for d, _ in matches}

        rows = []
        for d, t in matches:
            track = self.tracks[t]
            track.update(det_boxes[d], frame)
            if track.hits >= self.cfg.min_hits:
                rows.append(TrackRow(frame, track.track_id, det_boxes[d]))
        for d, box in enumerate(det_boxes):
            if d in matched_dets:
                continue
            track = KalmanBoxTrack(box, self._new_id(), frame)
            self.tracks.append(track)
            if track.hits >= self.cfg.min_hits:
                rows.append(TrackRow(frame, track.track_id, box))

        self._retire(frame)
        return sorted(rows, key=lambda r: r.track_id)


@dataclass
class _IouTrack:
    track_id: int
    box: Box
    last_update: int
    hits: int = 1


class IouTracker(_TrackerBase):
    """Greedy overlap tracker: each detection joins the free track it overlaps most"""

    def step(self, detections: Sequence[Detection], frame: int) -> List[TrackRow]:
        self._advance(frame)
        det_boxes = [d.box for d in detections]
        overlaps = iou_matrix(det_boxes, [t.box for t in self.tracks])
        pairs = sorted(
            ((overlaps[d, t], d, t) for d in range(overlaps.shape[0]) for t in range(overlaps.shape[1])),
            key=lambda p: (-p[0], p[1], p[2]),
        )
        used_dets, used_tracks = set(), set()
        rows = []
        for score, d, t in pairs:
            if score < self.cfg.iou_threshold or score <= 0:
                break
            if d in used_dets or t in used_tracks:
                continue
            used_dets.add(d)
            used_tracks.add(t)
            track = self.tracks[t]
            track.hits += 1
            track.box = det_boxes[d]
            track.last_update = frame
            if track.hits >= self.cfg.min_hits:
                rows.append(TrackRow(frame, track.track_id, det_boxes[d]))
        for d, box in enumerate(det_boxes):
            if d in used_dets:
                continue
            track = _IouTrack(self._new_id(), box, frame)
            self.tracks.append(track)
            if track.hits >= self.cfg.min_hits:
                rows.append(TrackRow(frame, track.track_id, box))
        self._retire(frame)
        return sorted(rows, key=lambda r: r.track_id)


def _load_user_tracker(spec: str):
    module_name, _, attr = spec.partition(":")
    if not module_name or not attr:
        raise ConfigError(f"user tracker must be 'module:attr', got '{spec}'")
    try:
        return getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as e:
        raise ConfigError(f"cannot load user tracker '{spec}': {str(e)}")


def create_tracker(name: str, cfg: Optional[TrackerConfig] = None) -> Tracker:
    """Resolve the tracker knob: 'sort' is built in, 'user' is pluggable"""
    if name == "sort":
        return SortTracker(cfg)
    if name == "user":
        spec = get_settings().user_tracker
        if spec:
            return _load_user_tracker(spec)(cfg or TrackerConfig())
        return IouTracker(cfg)
    raise ConfigError(f"unknown tracker '{name}'", details={"trackers": list(TRACKERS)})


def collect_tracks(rows: Iterable[TrackRow]) -> List[Track]:
    by_id: Dict[int, Track] = {}
    for row in rows:
        by_id.setdefault(row.track_id, Track(row.track_id)).observations.append((row.frame, row.box))
    for track in by_id.values():
        track.observations.sort(key=lambda o: o[0])
    return [by_id[k] for k in sorted(by_id)]


def run_tracker(tracker, detections_by_frame: Mapping[int, Sequence[Detection]],
                frames: Sequence[int], cfg: Optional[TrackerConfig] = None) -> List[TrackRow]:
    """Feed frames in order (with canonical detection order) and return every emitted row"""
    if isinstance(tracker, str):
        tracker = create_tracker(tracker, cfg)
    rows = []
    for f in frames:
        rows.extend(tracker.step(canonical_order(detections_by_frame.get(f, [])), f))
    return rows


def interpolate_tracks(tracks: Sequence[Track]) -> List[Track]:
    """Fill every missing frame between consecutive observations by linear interpolation of corners"""
    result = []
    for track in tracks:
        filled = []
        for (f_a, box_a), (f_b, box_b) in zip(track.observations, track.observations[1:]):
            filled.append((f_a, box_a))
            span = f_b - f_a
            for f in range(f_a + 1, f_b):
                t = (f - f_a) / span
                filled.append((f, tuple(a + t * (b - a) for a, b in zip(box_a, box_b))))
        if track.observations:
            filled.append(track.observations[-1])
        result.append(Track(track.track_id, filled))
    return result


def ground_truth_tracks(scenario: Scenario) -> List[Track]:
    rows = []
    for f in range(1, scenario.n_frames + 1):
        rows.extend(TrackRow(f, d.object_id, d.box) for d in ground_truth_boxes(scenario, f))
    return collect_tracks(rows)


def tracks_to_csv(tracks: Sequence[Track]) -> str:
    """MOT-style rows `frame,track_id,x,y,w,h` ordered by frame then id"""
    rows = sorted(
        (f, t.track_id, box) for t in tracks for f, box in t.observations
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame", "track_id", "x", "y", "w", "h"])
    for f, track_id, (x1, y1, x2, y2) in rows:
        writer.writerow([f, track_id, f"{x1:.2f}", f"{y1:.2f}", f"{x2 - x1:.2f}", f"{y2 - y1:.2f}"])
    return buf.getvalue()


def tracks_from_csv(text: str) -> List[Track]:
    reader = csv.DictReader(io.StringIO(text))
    rows = []
    try:
        for rec in reader:
            x, y, w, h = (float(rec[k]) for k in ("x", "y", "w", "h"))
            rows.append(TrackRow(int(rec["frame"]), int(rec["track_id"]), (x, y, x + w, y + h)))
    except (KeyError, ValueError) as e:
        raise TileSiftError(f"malformed tracks CSV: {str(e)}")
    return collect_tracks(rows)
