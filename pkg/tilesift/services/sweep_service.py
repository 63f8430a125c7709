"""
Configuration sweeps over the engine knobs, and the exhaustive-versus-heuristic
gap ablation on a small grid.
"""

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import get_settings
from evaluators.hota_evaluator import hota
from evaluators.pareto_evaluator import OperatingPoint
from schemas import AblationPointRecord, AblationRecord, ArtifactMeta, EngineConfig, Scenario
from .engine_service import EngineService, RunReport
from .exceptions import ConfigError
from .gap_service import GapSet, MissRateTensor, derive_gap_matrix, region_mean_rates
from .grid_service import PaddingMode, Tile, mask_from_boxes

logger = logging.getLogger(__name__)

SAMPLING_RATES = (1, 2, 4, 8, 16)
RELEVANCE_THRESHOLDS = (0.25, 0.5, 0.75)
TOLERANCES = (None, 0.4, 0.6, 0.8)
PADDINGS = tuple(PaddingMode)
SWEEP_TRACKERS = ("user", "sort")

ABLATION_GAMMAS = (1, 2, 4)
ABLATION_TOLERANCES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
ABLATION_HOTA_TOLERANCE = 0.05


def table_configs(sampling_rates: Iterable[int] = SAMPLING_RATES,
                  thresholds: Iterable[float] = RELEVANCE_THRESHOLDS,
                  tolerances: Iterable[Optional[float]] = TOLERANCES,
                  paddings: Iterable[PaddingMode] = PADDINGS,
                  trackers: Iterable[str] = SWEEP_TRACKERS,
                  **fixed) -> List[EngineConfig]:
    """Cross product of the knob values, duplicates removed, in product order"""
    configs = []
    seen = set()
    for s, t_r, m_bar, padding, tracker in itertools.product(sampling_rates, thresholds, tolerances, paddings, trackers):
        cfg = EngineConfig(s=s, T_r=t_r, M_bar=m_bar, padding=padding, tracker=tracker, **fixed)
        key = cfg.model_dump_json()
        if key in seen:
            continue
        seen.add(key)
        configs.append(cfg)
    return configs


# Worker state for process pools; set once per worker by the initializer
_worker: Dict[str, object] = {}


def _init_worker(state: Dict[str, object]):
    _worker.clear()
    _worker.update(state)


def _sweep_point(cfg: EngineConfig) -> Tuple[float, float]:
    engine: EngineService = _worker["engine"]
    scenario: Scenario = _worker["scenario"]
    tensors: Mapping[str, MissRateTensor] = _worker["tensors"]
    references: Mapping[str, RunReport] = _worker["references"]
    gaps = None
    if cfg.tolerance is not None:
        gaps = derive_gap_matrix(tensors[cfg.tracker], cfg.tolerance, GapSet(cfg.gammas))
    report = engine.run(scenario, cfg, gaps, _worker.get("prior"))
    accuracy = hota(report.tracks, references[cfg.tracker].tracks).hota
    return report.modeled_throughput_fps, accuracy


def _ablation_point(assignment: Tuple[int, ...]) -> Tuple[float, float]:
    engine: EngineService = _worker["engine"]
    gaps = _gaps_for(_worker["shape"], _worker["active"], assignment)
    reference: RunReport = _worker["reference"]
    result = engine.oracle_polyomino_run(_worker["scenario"], gaps, _worker["tracker"], reference)
    return result.pruning_ratio, hota(result.tracks, reference.tracks).hota


def _gaps_for(shape: Tuple[int, int], active: Sequence[Tile], assignment: Sequence[int]) -> np.ndarray:
    gaps = np.ones(shape, dtype=np.int64)
    for tile, gap in zip(active, assignment):
        gaps[tile] = gap
    return gaps


def _map(fn, items: Sequence, state: Dict[str, object], workers: int, chunksize: int = 1) -> List:
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(state,)) as pool:
            return list(pool.map(fn, items, chunksize=chunksize))
    _init_worker(state)
    return [fn(item) for item in items]


def frontier_2d(points: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    """Non-dominated (pruning ratio, hota) pairs, by pruning ratio ascending"""
    unique = sorted(set(points))
    kept = []
    for p in unique:
        dominated = any(
            q[0] >= p[0] and q[1] >= p[1] and q != p
            for q in unique
        )
        if not dominated:
            kept.append(p)
    return kept


def anchor_for(frontier: Sequence[Tuple[float, float]], ratio: float) -> Tuple[float, float]:
    """Frontier point with the highest pruning ratio not exceeding `ratio`"""
    eligible = [p for p in frontier if p[0] <= ratio + 1e-12]
    if not eligible:
        return frontier[0]
    return max(eligible, key=lambda p: (p[0], p[1]))


@dataclass
class AblationResult:
    gammas: Tuple[int, ...]
    active_tiles: List[Tile]
    assignments: int
    exhaustive_frontier: List[Tuple[float, float]]
    points: List[AblationPointRecord]

    @property
    def max_hota_loss(self) -> float:
        return max((p.hota_loss for p in self.points), default=0.0)

    def to_record(self, meta: Optional[ArtifactMeta] = None) -> AblationRecord:
        return AblationRecord(
            gammas=list(self.gammas),
            active_tiles=self.active_tiles,
            assignments=self.assignments,
            exhaustive_frontier=self.exhaustive_frontier,
            points=self.points,
            meta=meta,
        )


class SweepService:
    def __init__(self, engine: Optional[EngineService] = None, workers: Optional[int] = None):
        self.engine = engine or EngineService()
        self.workers = workers if workers is not None else get_settings().workers

    def references(self, scenario: Scenario, trackers: Iterable[str]) -> Dict[str, RunReport]:
        return {tracker: self.engine.reference_run(scenario, tracker) for tracker in sorted(set(trackers))}

    def sweep(self, scenario: Scenario, tensors: Mapping[str, MissRateTensor],
              configs: Optional[Sequence[EngineConfig]] = None,
              references: Optional[Mapping[str, RunReport]] = None,
              position_prior: Optional[np.ndarray] = None) -> List[OperatingPoint]:
        """
        One operating point per configuration: modeled throughput and HOTA
        against the reference pipeline run with the same tracker. Gap matrices
        come from the tensor measured for that tracker; motion-scored
        configurations weight tiles by position_prior.
        """
        configs = list(configs) if configs is not None else table_configs()
        needs_gaps = {cfg.tracker for cfg in configs if cfg.tolerance is not None}
        missing = sorted(needs_gaps - set(tensors))
        if missing:
            raise ConfigError("no mistrack tensor for tracker", details={"trackers": missing})
        references = dict(references) if references is not None else self.references(scenario, {c.tracker for c in configs})

        logger.info(f"Sweeping {len(configs)} configurations on {self.workers} worker(s)")
        state = {"engine": self.engine, "scenario": scenario, "tensors": dict(tensors), "references": references,
                 "prior": position_prior}
        results = _map(_sweep_point, configs, state, self.workers)
        return [OperatingPoint(cfg, fps, acc) for cfg, (fps, acc) in zip(configs, results)]

    def gap_ablation(self, train: Scenario, validation: Scenario, gammas: Sequence[int] = ABLATION_GAMMAS,
                     tolerances: Sequence[float] = ABLATION_TOLERANCES, tracker: str = "sort") -> AblationResult:
        """
        Compare gap matrices derived from learned mistrack rates against every
        per-tile gap assignment. Tiles never relevant in the validation clip
        stay at gap 1 since their gap cannot change the outcome.
        """
        if train.grid.shape != validation.grid.shape:
            raise ConfigError("training and validation grids differ",
                              details={"train": list(train.grid.shape), "validation": list(validation.grid.shape)})
        gap_set = GapSet(tuple(gammas))
        grid = validation.grid
        tensor = self.engine.learn_gap_tensor([train], tracker, gap_set)
        reference = self.engine.reference_run(validation, tracker)

        seen = np.zeros(grid.shape, dtype=bool)
        for f, dets in reference.detections.items():
            seen |= mask_from_boxes([d.box for d in dets], grid, f).relevant
        active = [(int(i), int(j)) for i, j in np.argwhere(seen)]
        assignments = list(itertools.product(gap_set.values, repeat=len(active)))
        logger.info(f"Gap ablation: {len(active)} active tiles, {len(assignments)} assignments")

        state = {"engine": self.engine, "scenario": validation, "reference": reference, "tracker": tracker,
                 "shape": grid.shape, "active": active}
        exhaustive = _map(_ablation_point, assignments, state, self.workers, chunksize=64)
        frontier = frontier_2d(exhaustive)

        points = []
        for tolerance in tolerances:
            gaps = derive_gap_matrix(tensor, tolerance, gap_set)
            result = self.engine.oracle_polyomino_run(validation, gaps.gaps, tracker, reference)
            score = hota(result.tracks, reference.tracks).hota
            anchor = anchor_for(frontier, result.pruning_ratio)
            points.append(AblationPointRecord(
                tolerance=tolerance,
                pruning_ratio=result.pruning_ratio,
                hota=score,
                anchor_pruning_ratio=anchor[0],
                anchor_hota=anchor[1],
                hota_loss=anchor[1] - score,
            ))
            logger.info(
                f"M_bar={tolerance}: pruning ratio {result.pruning_ratio:.3f}, HOTA {score:.4f}, "
                f"anchor HOTA {anchor[1]:.4f}"
            )
        return AblationResult(tuple(gap_set), active, len(assignments), frontier, points)


def spatial_variance(tensor: MissRateTensor, gamma: int, scenario: Scenario) -> Dict[str, float]:
    """Mean mistrack rate over each named region of the scenario"""
    if not scenario.regions:
        raise ConfigError("scenario has no named regions", details={"preset": scenario.preset})
    return region_mean_rates(tensor, gamma, scenario.regions)

