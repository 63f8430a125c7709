from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from services.grid_service import PaddingMode, Polyomino, TileGrid, build_grid

ALLOWED_SAMPLING_RATES = (1, 2, 4, 8, 16)
SCORERS = ("oracle", "motion")


class ArtifactMeta(BaseModel):
    """Provenance block embedded in every artifact file"""
    command: str
    seed: Optional[int] = None
    config: Dict[str, Any] = Field(default_factory=dict)
    created_at: Optional[str] = None


class ErrorDetails(BaseModel):
    error_type: str  # e.g. "GridMismatchError", "InfeasibleConstraintError"
    message: str
    exit_code: int
    details: Optional[Dict[str, Any]] = None


# Scenario Schemas
class ObjectSpec(BaseModel):
    id: int
    w: int = Field(gt=0)
    h: int = Field(gt=0)
    waypoints: List[Tuple[int, float, float]]  # (frame, centre x, centre y)
    intensity: int = Field(200, ge=0, le=255)

    @field_validator("waypoints")
    @classmethod
    def frames_increasing(cls, v):
        if not v:
            raise ValueError("object needs at least one waypoint")
        frames = [int(w[0]) for w in v]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("waypoint frames must be strictly increasing")
        return v

    @property
    def first_frame(self) -> int:
        return int(self.waypoints[0][0])

    @property
    def last_frame(self) -> int:
        return int(self.waypoints[-1][0])


class Scenario(BaseModel):
    seed: int = 0
    frame_w: int
    frame_h: int
    tile_size: int
    n_frames: int = Field(ge=1)
    fps: float = 15.0
    preset: Optional[str] = None
    background: int = Field(40, ge=0, le=255)
    objects: List[ObjectSpec] = Field(default_factory=list)
    regions: Dict[str, List[Tuple[int, int]]] = Field(default_factory=dict)
    meta: Optional[ArtifactMeta] = None

    @model_validator(mode="after")
    def grid_divides(self):
        build_grid(self.frame_w, self.frame_h, self.tile_size)
        return self

    @property
    def grid(self) -> TileGrid:
        return build_grid(self.frame_w, self.frame_h, self.tile_size)


class PolyominoRecord(BaseModel):
    frame: int
    tiles: List[Tuple[int, int]]

    @classmethod
    def from_polyomino(cls, p: Polyomino) -> "PolyominoRecord":
        return cls(frame=p.frame_index, tiles=[tuple(t) for t in p.tiles])


# Engine configuration (sweep knobs)
class EngineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    sampling_rate: int = Field(1, alias="s")
    relevance_threshold: float = Field(0.5, alias="T_r", ge=0.0, le=1.0)
    tolerance: Optional[float] = Field(None, alias="M_bar")
    padding: PaddingMode = PaddingMode.NONE
    tracker: str = "sort"
    window_frames: int = Field(16, alias="window_N")
    gammas: Tuple[int, ...] = (1, 2, 4, 8, 16)
    scorer: Literal["oracle", "motion"] = "oracle"

    @field_validator("tolerance", mode="before")
    @classmethod
    def parse_tolerance(cls, v):
        if v is None or (isinstance(v, str) and v.lower() == "none"):
            return None
        v = float(v)
        if not 0.0 <= v <= 1.0:
            raise ValueError("M_bar must lie in [0, 1] or be 'none'")
        return v

    @field_validator("sampling_rate")
    @classmethod
    def check_sampling_rate(cls, v):
        if v not in ALLOWED_SAMPLING_RATES:
            raise ValueError(f"s must be one of {ALLOWED_SAMPLING_RATES}")
        return v

    @model_validator(mode="after")
    def check_window(self):
        if not self.gammas or self.gammas[0] != 1 or any(b <= a for a, b in zip(self.gammas, self.gammas[1:])):
            raise ValueError("gammas must start at 1 and be strictly increasing")
        if self.window_frames < max(self.gammas):
            raise ValueError("window_N must be at least max(gammas)")
        return self

    def table_keys(self) -> Dict[str, Any]:
        """The sweep knobs, as written to frontier CSVs"""
        return {
            "s": self.sampling_rate,
            "T_r": self.relevance_threshold,
            "M_bar": "none" if self.tolerance is None else self.tolerance,
            "padding": self.padding.value,
            "tracker": self.tracker,
        }


# Gap learning artifacts
class MissRateTensorRecord(BaseModel):
    gammas: List[int]
    rows: int
    cols: int
    missed: List[List[List[int]]]  # |gammas| x H x W
    total: List[List[int]]  # H x W
    meta: Optional[ArtifactMeta] = None


class GapMatrixRecord(BaseModel):
    tolerance: Optional[float] = None  # None for matrices not derived from a tolerance
    gammas: List[int]
    gaps: List[List[int]]
    meta: Optional[ArtifactMeta] = None


class PositionPriorRecord(BaseModel):
    """Per-tile weights for the motion scorer"""
    floor: float = 0.0
    values: List[List[float]]
    meta: Optional[ArtifactMeta] = None

    @model_validator(mode="after")
    def check_values(self):
        widths = {len(row) for row in self.values}
        if not self.values or len(widths) != 1:
            raise ValueError("position prior must be a non-empty rectangular matrix")
        if any(v < 0.0 or v > 1.0 for row in self.values for v in row):
            raise ValueError("position prior values must lie in [0, 1]")
        return self


# Pruning instance / solution (golden tests)
class PruneInstanceRecord(BaseModel):
    frame_start: int
    frame_end: int
    rows: int
    cols: int
    gaps: List[List[int]]
    polyominoes: List[PolyominoRecord]
    last_covered: Dict[str, int] = Field(default_factory=dict)  # "i,j" -> frame


class PruneSolutionRecord(BaseModel):
    selected: List[Tuple[int, int]]
    objective: int
    optimal: bool = True


# Packing artifacts
class PlacementRecord(BaseModel):
    frame: int
    poly_index: int
    offset: Tuple[int, int]


class CanvasManifest(BaseModel):
    canvas_id: int
    placements: List[PlacementRecord]


class CanvasSidecar(BaseModel):
    canvas_id: int
    width: int
    height: int
    dtype: str = "uint8"
    channels: int = 1


# Engine / evaluation outputs
class RunReportRecord(BaseModel):
    frames: int
    frames_retained: int
    detector_calls: int
    canvases: int
    tiles_selected: int
    tiles_total: int
    pruning_ratio: float
    packing_efficacy: float
    solver_fallbacks: int
    modeled_throughput_fps: float
    stage_seconds: Dict[str, float]
    config: Dict[str, Any]
    meta: Optional[ArtifactMeta] = None


class HotaRecord(BaseModel):
    hota: float
    det_a: float
    ass_a: float
    loc_a: float
    alphas: List[float]
    hota_per_alpha: List[float]
    det_a_per_alpha: List[float]
    ass_a_per_alpha: List[float]


class OperatingPointRecord(BaseModel):
    config: Dict[str, Any]
    throughput: float
    accuracy: float


class SweepRecord(BaseModel):
    points: List[OperatingPointRecord]
    meta: Optional[ArtifactMeta] = None


class AblationPointRecord(BaseModel):
    tolerance: float
    pruning_ratio: float
    hota: float
    anchor_pruning_ratio: float
    anchor_hota: float
    hota_loss: float


class AblationRecord(BaseModel):
    gammas: List[int]
    active_tiles: List[Tuple[int, int]]
    assignments: int
    exhaustive_frontier: List[Tuple[float, float]]
    points: List[AblationPointRecord]
    meta: Optional[ArtifactMeta] = None
