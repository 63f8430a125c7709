"""
Per-tile maximum sampling gaps.

Tracks the reference tracker produces at the native frame rate are compared
with tracks produced from every gamma-th frame only. Each reference link that
the sampled run breaks counts as a mistrack at the tile under the later box
centre. Laplace-smoothed rates then yield, for any tolerance, the largest gap
each tile can be sampled at.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from schemas import ArtifactMeta, GapMatrixRecord, MissRateTensorRecord
from .exceptions import GapSetError, TileSiftError
from .grid_service import TileGrid
from .scene_service import Detection
from .tracker_service import TrackRow, TrackerConfig, collect_tracks, run_tracker

logger = logging.getLogger(__name__)

DEFAULT_GAMMAS = (1, 2, 4, 8, 16)
DEFAULT_TOLERANCES = (0.4, 0.6, 0.8)


@dataclass(frozen=True)
class GapSet:
    values: Tuple[int, ...] = DEFAULT_GAMMAS

    def __post_init__(self):
        values = tuple(int(v) for v in self.values)
        if not values or values[0] != 1:
            raise GapSetError("gap set must contain 1 as its smallest gap", details={"gammas": list(values)})
        if any(b <= a for a, b in zip(values, values[1:])):
            raise GapSetError("gap set must be strictly increasing", details={"gammas": list(values)})
        object.__setattr__(self, "values", values)

    @classmethod
    def parse(cls, text: str) -> "GapSet":
        try:
            return cls(tuple(int(v) for v in text.split(",") if v.strip()))
        except ValueError:
            raise GapSetError(f"cannot parse gap set '{text}'")

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    @property
    def max(self) -> int:
        return self.values[-1]


@dataclass
class MissRateTensor:
    gammas: Tuple[int, ...]
    missed: np.ndarray  # |gammas| x H x W
    total: np.ndarray  # H x W

    def __post_init__(self):
        self.missed = np.asarray(self.missed, dtype=np.int64)
        self.total = np.asarray(self.total, dtype=np.int64)
        if self.missed.shape != (len(self.gammas),) + self.total.shape:
            raise TileSiftError("tensor counts do not match gammas and grid",
                                details={"missed": self.missed.shape, "total": self.total.shape})

    @property
    def shape(self) -> Tuple[int, int]:
        return self.total.shape

    @property
    def rates(self) -> np.ndarray:
        return (self.missed + 1) / (self.total[np.newaxis, :, :] + 2)

    def rate(self, gamma: int) -> np.ndarray:
        if gamma not in self.gammas:
            raise GapSetError(f"gap {gamma} was not measured", details={"gammas": list(self.gammas)})
        return self.rates[self.gammas.index(gamma)]

    def to_record(self, meta: Optional[ArtifactMeta] = None) -> MissRateTensorRecord:
        rows, cols = self.shape
        return MissRateTensorRecord(
            gammas=list(self.gammas), rows=rows, cols=cols,
            missed=self.missed.tolist(), total=self.total.tolist(), meta=meta,
        )

    @classmethod
    def from_record(cls, record: MissRateTensorRecord) -> "MissRateTensor":
        return cls(tuple(record.gammas), np.array(record.missed), np.array(record.total))


@dataclass(frozen=True)
class GapMatrix:
    tolerance: float
    gammas: Tuple[int, ...]
    gaps: np.ndarray = field(repr=False)

    def __post_init__(self):
        gaps = np.array(self.gaps, dtype=np.int64)
        allowed = set(self.gammas) | {1}
        if gaps.size and not set(np.unique(gaps).tolist()) <= allowed:
            raise GapSetError("gap matrix entries must come from the gap set", details={"gammas": list(self.gammas)})
        gaps.setflags(write=False)
        object.__setattr__(self, "gaps", gaps)

    def scaled(self, sampling_rate: int) -> np.ndarray:
        """Gaps in retained-frame units for a stream keeping every s-th frame"""
        return np.maximum(1, self.gaps // sampling_rate)

    def to_record(self, meta: Optional[ArtifactMeta] = None) -> GapMatrixRecord:
        tolerance = None if np.isnan(self.tolerance) else self.tolerance
        return GapMatrixRecord(tolerance=tolerance, gammas=list(self.gammas), gaps=self.gaps.tolist(), meta=meta)

    @classmethod
    def from_record(cls, record: GapMatrixRecord) -> "GapMatrix":
        tolerance = float("nan") if record.tolerance is None else record.tolerance
        return cls(tolerance, tuple(record.gammas), np.array(record.gaps))


def _tile_of(box, grid: TileGrid) -> Tuple[int, int]:
    return grid.tile_of_point((box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0)


def measure_mistracks(reference_rows: Sequence[TrackRow], detections_by_frame: Mapping[int, Sequence[Detection]],
                      gammas: GapSet, grid: TileGrid, n_frames: int, tracker: str = "sort",
                      tracker_cfg: Optional[TrackerConfig] = None) -> MissRateTensor:
    """
    Count reference links and the ones each sampling gap breaks.

    TotalA counts native links (f, f+1) of each reference track. For a gap g
    the tracker is re-run on frames 1, 1+g, ...; a reference track observed
    on every frame of [f, f+g] contributes one link for consecutive sampled
    frames f and f+g, missed unless the sampled run keeps both endpoint boxes
    in one track. Both counts go to the tile under the later box centre.
    """
    if not isinstance(gammas, GapSet):
        gammas = GapSet(tuple(gammas))
    reference = collect_tracks(reference_rows)

    total = np.zeros(grid.shape, dtype=np.int64)
    for track in reference:
        for (f_a, _), (f_b, box_b) in zip(track.observations, track.observations[1:]):
            if f_b == f_a + 1:
                total[_tile_of(box_b, grid)] += 1

    missed = np.zeros((len(gammas),) + grid.shape, dtype=np.int64)
    for g_idx, gamma in enumerate(gammas):
        sampled = list(range(1, n_frames + 1, gamma))
        rows = run_tracker(tracker, detections_by_frame, sampled, tracker_cfg)
        identity = {(r.frame, r.box): r.track_id for r in rows}
        sampled_set = set(sampled)
        broken = 0
        for track in reference:
            boxes = dict(track.observations)
            for f in sampled:
                f_next = f + gamma
                if f_next not in sampled_set:
                    continue
                if not all(k in boxes for k in range(f, f_next + 1)):
                    continue
                id_a = identity.get((f, boxes[f]))
                id_b = identity.get((f_next, boxes[f_next]))
                if id_a is None or id_a != id_b:
                    missed[g_idx][_tile_of(boxes[f_next], grid)] += 1
                    broken += 1
        logger.debug(f"gap {gamma}: {broken} broken reference links")

    logger.info(f"Measured mistracks for gaps {list(gammas)}: {int(total.sum())} reference links")
    return MissRateTensor(tuple(gammas), missed, total)


def derive_gap_matrix(tensor: MissRateTensor, tolerance: float, gammas: Optional[GapSet] = None) -> GapMatrix:
    """Largest gap whose smoothed mistrack rate stays within the tolerance; 1 if none does"""
    gamma_values = tuple(gammas) if gammas is not None else tensor.gammas
    rates = tensor.rates
    gaps = np.ones(tensor.shape, dtype=np.int64)
    for gamma in gamma_values:
        idx = tensor.gammas.index(gamma)
        gaps = np.where(rates[idx] <= tolerance, gamma, gaps)
    return GapMatrix(float(tolerance), tuple(gamma_values), gaps)


def sweep_tolerances(tensor: MissRateTensor, tolerances: Sequence[float]) -> List[GapMatrix]:
    if any(b < a for a, b in zip(tolerances, tolerances[1:])):
        raise TileSiftError("tolerances must be sorted", details={"tolerances": list(tolerances)})
    return [derive_gap_matrix(tensor, t) for t in tolerances]


def merge_tensors(tensors: Iterable[MissRateTensor]) -> MissRateTensor:
    """Sum counts measured on several videos of the same camera"""
    tensors = list(tensors)
    if not tensors:
        raise TileSiftError("no tensors to merge")
    first = tensors[0]
    for other in tensors[1:]:
        if other.gammas != first.gammas or other.shape != first.shape:
            raise TileSiftError("tensors disagree on gammas or grid shape")
    return MissRateTensor(
        first.gammas,
        sum(t.missed for t in tensors),
        sum(t.total for t in tensors),
    )


def region_mean_rates(tensor: MissRateTensor, gamma: int, regions: Mapping[str, Sequence[Tuple[int, int]]]) -> Dict[str, float]:
    rates = tensor.rate(gamma)
    means = {}
    for name, tiles in regions.items():
        values = [rates[i, j] for i, j in tiles]
        means[name] = float(np.mean(values)) if values else 0.0
    return means
