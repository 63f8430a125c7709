import logging
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import Settings, get_settings
from schemas import ArtifactMeta, EngineConfig, RunReportRecord, Scenario
from .exceptions import ConfigError
from .gap_service import GapMatrix, GapSet, MissRateTensor, measure_mistracks, merge_tensors
from .grid_service import (
    PaddingMode,
    PaddingSpec,
    Polyomino,
    TileGrid,
    extract_polyominoes,
    mask_from_boxes,
    threshold_scores,
)
from .packer_service import Canvas, PackerService, Placement, RenderedCanvas
from .pruner_service import WindowedPruner
from .scene_service import Detection, Frame, SceneService, learn_position_prior
from .tracker_service import Track, TrackRow, TrackerConfig, collect_tracks, run_tracker

logger = logging.getLogger(__name__)

STAGES = ("score", "prune", "pack", "render", "detect", "unpack", "track")

CanvasSink = Callable[[RenderedCanvas], None]


@dataclass
class RunReport:
    tracks: List[Track]
    rows: List[TrackRow]
    detections: Dict[int, List[Detection]]
    frames: int
    frames_retained: int
    detector_calls: int
    tiles_selected: int
    tiles_total: int
    packing_efficacy: float
    solver_fallbacks: int
    modeled_throughput_fps: float
    stage_seconds: Dict[str, float]
    config: EngineConfig
    canvas_layouts: List[Canvas] = field(default_factory=list, repr=False)

    @property
    def canvases(self) -> int:
        return self.detector_calls

    @property
    def pruning_ratio(self) -> float:
        """Fraction of relevant tiles skipped"""
        if self.tiles_total == 0:
            return 0.0
        return 1.0 - self.tiles_selected / self.tiles_total

    def to_record(self, meta: Optional[ArtifactMeta] = None) -> RunReportRecord:
        return RunReportRecord(
            frames=self.frames,
            frames_retained=self.frames_retained,
            detector_calls=self.detector_calls,
            canvases=self.canvases,
            tiles_selected=self.tiles_selected,
            tiles_total=self.tiles_total,
            pruning_ratio=self.pruning_ratio,
            packing_efficacy=self.packing_efficacy,
            solver_fallbacks=self.solver_fallbacks,
            modeled_throughput_fps=self.modeled_throughput_fps,
            stage_seconds=self.stage_seconds,
            config=self.config.model_dump(by_alias=True, mode="json"),
            meta=meta,
        )


@dataclass
class OraclePolyominoResult:
    tracks: List[Track]
    rows: List[TrackRow]
    tiles_selected: int
    tiles_total: int

    @property
    def pruning_ratio(self) -> float:
        if self.tiles_total == 0:
            return 0.0
        return 1.0 - self.tiles_selected / self.tiles_total


@dataclass
class _PreparedWindow:
    """Everything up to the detector call for one window of retained frames"""
    canvases: List[Canvas]
    frames: Dict[int, Frame]
    cores: Dict[int, List[frozenset]]  # frame -> core tile sets of its selected polyominoes
    tiles_selected: int
    tiles_total: int
    timings: Dict[str, float] = field(default_factory=dict)


def retained_frames(n_frames: int, sampling_rate: int) -> List[int]:
    """Frames 1, 1+s, 1+2s, ..."""
    return list(range(1, n_frames + 1, sampling_rate))


def full_frame_polyomino(grid: TileGrid, frame: int) -> Polyomino:
    tiles = tuple((i, j) for i in range(grid.rows) for j in range(grid.cols))
    return Polyomino(frame, tiles, 0)


def deduplicate_padding(unpacked: Iterable[Tuple[Detection, Placement, int]], grid: TileGrid,
                        cores: Dict[int, List[frozenset]]) -> List[Detection]:
    """
    Keep a detection when its centre tile is a core tile of the placement it
    came through. Detections that only reached a frame through padding are
    kept when no core tile of that frame holds their centre, and then only
    from the earliest placement that produced one at that tile.
    """
    kept = []
    padding_only: Dict[Tuple[int, Tuple[int, int]], Tuple[Tuple[int, int], List[Detection]]] = {}
    for det, placement, order in unpacked:
        tile = grid.tile_of_point(*det.center)
        if tile in placement.padded.core:
            kept.append(det)
            continue
        if any(tile in core for core in cores.get(det.frame, [])):
            continue
        key = (det.frame, tile)
        rank = (order, placement.poly_index)
        current = padding_only.get(key)
        if current is None or rank < current[0]:
            padding_only[key] = (rank, [det])
        elif rank == current[0]:
            current[1].append(det)
    for _, dets in padding_only.values():
        kept.extend(dets)
    return kept


class EngineService:
    """Runs the tile-level extraction pipeline and its reference counterpart over a scenario"""

    def __init__(self, settings: Optional[Settings] = None, tracker_cfg: Optional[TrackerConfig] = None):
        self.settings = settings or get_settings()
        self.tracker_cfg = tracker_cfg or TrackerConfig()

    def _modeled_throughput(self, n_frames: int, detector_calls: int, retained: int) -> float:
        cost = self.settings.detector_cost_s * detector_calls + self.settings.classifier_cost_s * retained
        return n_frames / max(cost, 1e-9)

    def _detect(self, scene: SceneService, packer: PackerService, canvases: Sequence[Canvas],
                frames: Dict[int, Frame], timings: Dict[str, float],
                canvas_sink: Optional[CanvasSink] = None) -> List[Tuple[Detection, Placement, int]]:
        unpacked = []
        for canvas in canvases:
            start = time.perf_counter()
            rendered = packer.render(canvas, frames)
            timings["render"] += time.perf_counter() - start
            if canvas_sink is not None:
                canvas_sink(rendered)

            start = time.perf_counter()
            canvas_dets = scene.detect(rendered)
            timings["detect"] += time.perf_counter() - start

            start = time.perf_counter()
            unpacked.extend((det, placement, canvas.canvas_id) for det, placement in packer.unpack(canvas_dets, canvas))
            timings["unpack"] += time.perf_counter() - start
        return unpacked

    def _check(self, scenario: Scenario, cfg: EngineConfig, gaps: Optional[GapMatrix],
               position_prior: Optional[np.ndarray] = None):
        if cfg.tolerance is not None and gaps is None:
            raise ConfigError("gap matrix required when M_bar is set", details={"M_bar": cfg.tolerance})
        if gaps is not None and gaps.gaps.shape != scenario.grid.shape:
            raise ConfigError("gap matrix does not match the grid",
                              details={"gaps": list(gaps.gaps.shape), "grid": list(scenario.grid.shape)})
        if position_prior is not None and np.shape(position_prior) != scenario.grid.shape:
            raise ConfigError("position prior does not match the grid",
                              details={"prior": list(np.shape(position_prior)), "grid": list(scenario.grid.shape)})

    def run(self, scenario: Scenario, cfg: EngineConfig, gaps: Optional[GapMatrix] = None,
            position_prior: Optional[np.ndarray] = None, canvas_sink: Optional[CanvasSink] = None) -> RunReport:
        """
        Retain every s-th frame, score and threshold tiles, prune under the gap
        matrix when a tolerance is set, pad, pack per window, detect, unpack
        and track. Frames are held only while their window is in flight;
        canvas_sink sees every rendered canvas.
        """
        self._check(scenario, cfg, gaps, position_prior)
        grid = scenario.grid
        scene = SceneService(scenario, self.settings.motion_saturation)
        packer = PackerService(grid, PaddingSpec(cfg.padding))
        retained = retained_frames(scenario.n_frames, cfg.sampling_rate)
        windows = [retained[i:i + cfg.window_frames] for i in range(0, len(retained), cfg.window_frames)]
        prior = np.ones(grid.shape) if position_prior is None else np.asarray(position_prior, dtype=np.float64)
        pruner = None
        if cfg.tolerance is not None:
            pruner = WindowedPruner(gaps.scaled(cfg.sampling_rate), time_limit_s=self.settings.solver_time_limit_s)

        state = {"prev": None, "position": 0}

        def prepare(window: List[int]) -> _PreparedWindow:
            timings = defaultdict(float)
            start = time.perf_counter()
            frames: Dict[int, Frame] = {}
            polys_by_frame: Dict[int, List[Polyomino]] = {}
            for f in window:
                frame = frames[f] = scene.frame(f)
                if cfg.scorer == "oracle":
                    scores = scene.oracle_scores(f)
                else:
                    scores = scene.motion_scores(state["prev"], frame, prior)
                state["prev"] = frame
                polys_by_frame[f] = extract_polyominoes(threshold_scores(scores, cfg.relevance_threshold))
            timings["score"] += time.perf_counter() - start

            start = time.perf_counter()
            tiles_total = sum(p.size for polys in polys_by_frame.values() for p in polys)
            selected = [p for f in window for p in polys_by_frame[f]]
            if pruner is not None:
                # the pruner works in retained-frame positions
                first = state["position"] + 1
                position_of = {f: first + n for n, f in enumerate(window)}
                frame_of = {v: k for k, v in position_of.items()}
                staged = [Polyomino(position_of[p.frame_index], p.tiles, p.index) for p in selected]
                solution = pruner.solve_window(first, first + len(window) - 1, staged)
                keep = {(frame_of[pos], k) for pos, k in solution.selected}
                selected = [p for p in selected if (p.frame_index, p.index) in keep]
            state["position"] += len(window)
            timings["prune"] += time.perf_counter() - start

            start = time.perf_counter()
            canvases = packer.pack_window(selected)
            timings["pack"] += time.perf_counter() - start

            # only frames that feed a canvas stay alive
            needed = {p.frame_index for p in selected}
            frames = {f: frame for f, frame in frames.items() if f in needed}
            cores: Dict[int, List[frozenset]] = defaultdict(list)
            for p in selected:
                cores[p.frame_index].append(p.tile_set)
            return _PreparedWindow(canvases, frames, dict(cores), sum(p.size for p in selected), tiles_total,
                                   dict(timings))

        timings: Dict[str, float] = {stage: 0.0 for stage in STAGES}
        detections: Dict[int, List[Detection]] = defaultdict(list)
        tiles_selected = tiles_total = 0

        def consume(prepared: _PreparedWindow):
            nonlocal tiles_selected, tiles_total
            for stage, seconds in prepared.timings.items():
                timings[stage] += seconds
            unpacked = self._detect(scene, packer, prepared.canvases, prepared.frames, timings, canvas_sink)
            for det in deduplicate_padding(unpacked, grid, prepared.cores):
                detections[det.frame].append(det)
            tiles_selected += prepared.tiles_selected
            tiles_total += prepared.tiles_total

        if self.settings.workers > 1 and len(windows) > 1:
            with ThreadPoolExecutor(max_workers=1) as executor:
                future = executor.submit(prepare, windows[0])
                for nxt in windows[1:] + [None]:
                    prepared = future.result()
                    if nxt is not None:
                        future = executor.submit(prepare, nxt)
                    consume(prepared)
                    del prepared
        else:
            for window in windows:
                consume(prepare(window))

        start = time.perf_counter()
        rows = run_tracker(cfg.tracker, detections, retained, self.tracker_cfg)
        timings["track"] += time.perf_counter() - start

        calls = len(packer.canvases)
        report = RunReport(
            tracks=collect_tracks(rows),
            rows=rows,
            detections=dict(detections),
            frames=scenario.n_frames,
            frames_retained=len(retained),
            detector_calls=calls,
            tiles_selected=tiles_selected,
            tiles_total=tiles_total,
            packing_efficacy=packer.efficacy,
            solver_fallbacks=pruner.fallbacks if pruner is not None else 0,
            modeled_throughput_fps=self._modeled_throughput(scenario.n_frames, calls, len(retained)),
            stage_seconds=timings,
            config=cfg,
            canvas_layouts=packer.canvases,
        )
        logger.info(
            f"Run {cfg.table_keys()}: {report.detector_calls} detector calls for {report.frames} frames, "
            f"pruning ratio {report.pruning_ratio:.3f}"
        )
        return report

    def reference_run(self, scenario: Scenario, tracker: str = "sort") -> RunReport:
        """Full-frame detection on every frame, tracked at the native rate"""
        grid = scenario.grid
        scene = SceneService(scenario, self.settings.motion_saturation)
        packer = PackerService(grid)
        frames = list(range(1, scenario.n_frames + 1))
        timings: Dict[str, float] = {stage: 0.0 for stage in STAGES}
        detections: Dict[int, List[Detection]] = defaultdict(list)
        for f in frames:
            frame = scene.frame(f)
            start = time.perf_counter()
            canvases = packer.pack_window([full_frame_polyomino(grid, f)])
            timings["pack"] += time.perf_counter() - start
            for det, _, _ in self._detect(scene, packer, canvases, {f: frame}, timings):
                detections[det.frame].append(det)

        start = time.perf_counter()
        rows = run_tracker(tracker, detections, frames, self.tracker_cfg)
        timings["track"] += time.perf_counter() - start
        tiles = grid.tile_count * len(frames)
        calls = len(packer.canvases)
        cfg = EngineConfig(s=1, T_r=0.0, M_bar=None, padding=PaddingMode.NONE, tracker=tracker, scorer="oracle")
        return RunReport(
            tracks=collect_tracks(rows),
            rows=rows,
            detections=dict(detections),
            frames=scenario.n_frames,
            frames_retained=len(frames),
            detector_calls=calls,
            tiles_selected=tiles,
            tiles_total=tiles,
            packing_efficacy=packer.efficacy,
            solver_fallbacks=0,
            modeled_throughput_fps=self._modeled_throughput(scenario.n_frames, calls, len(frames)),
            stage_seconds=timings,
            config=cfg,
            canvas_layouts=packer.canvases,
        )

    def oracle_polyomino_run(self, scenario: Scenario, gaps: np.ndarray, tracker: str = "sort",
                             reference: Optional[RunReport] = None, window_frames: int = 16) -> OraclePolyominoResult:
        """
        Build polyominoes straight from reference boxes, prune them, keep the
        reference detections centred inside a kept polyomino, and track those.
        """
        grid = scenario.grid
        reference = reference or self.reference_run(scenario, tracker)
        frames = list(range(1, scenario.n_frames + 1))
        pruner = WindowedPruner(np.asarray(gaps), time_limit_s=self.settings.solver_time_limit_s)

        kept_detections: Dict[int, List[Detection]] = {}
        tiles_selected = tiles_total = 0
        for w_start in range(0, len(frames), window_frames):
            window = frames[w_start:w_start + window_frames]
            polys = []
            for f in window:
                boxes = [d.box for d in reference.detections.get(f, [])]
                found = extract_polyominoes(mask_from_boxes(boxes, grid, f))
                polys.extend(found)
                tiles_total += sum(p.size for p in found)
            solution = pruner.solve_window(window[0], window[-1], polys)
            tiles_selected += solution.objective
            keep = set(solution.selected)
            kept_tiles: Dict[int, set] = defaultdict(set)
            for p in polys:
                if (p.frame_index, p.index) in keep:
                    kept_tiles[p.frame_index] |= p.tile_set
            for f in window:
                kept_detections[f] = [
                    d for d in reference.detections.get(f, [])
                    if grid.tile_of_point(*d.center) in kept_tiles[f]
                ]

        rows = run_tracker(tracker, kept_detections, frames, self.tracker_cfg)
        return OraclePolyominoResult(collect_tracks(rows), rows, tiles_selected, tiles_total)

    def learn_gap_tensor(self, scenarios: Sequence[Scenario], tracker: str = "sort",
                         gammas: GapSet = GapSet()) -> MissRateTensor:
        """Reference-run each training scenario and sum their mistrack counts"""
        tensors = []
        for scenario in scenarios:
            reference = self.reference_run(scenario, tracker)
            tensors.append(measure_mistracks(
                reference.rows, reference.detections, gammas, scenario.grid,
                scenario.n_frames, tracker, self.tracker_cfg,
            ))
        return merge_tensors(tensors)

    def learn_position_prior(self, scenarios: Sequence[Scenario], floor: float = 0.0) -> np.ndarray:
        """Tiles relevant anywhere in the training scenarios get 1.0, the rest floor"""
        grids = {s.grid.shape for s in scenarios}
        if len(grids) != 1:
            raise ConfigError("training scenarios use different grids", details={"grids": sorted(grids)})
        prior = np.maximum.reduce([learn_position_prior(s, floor) for s in scenarios])
        logger.info(f"Learned position prior: {int((prior >= 1.0).sum())} of {prior.size} tiles seen")
        return prior
