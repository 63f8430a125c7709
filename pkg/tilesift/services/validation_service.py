import math
from typing import Dict, Any, List, Optional
import logging
from dataclasses import dataclass

import numpy as np
from pydantic import ValidationError

from schemas import EngineConfig, Scenario
from .exceptions import ConfigError
from .gap_service import GapMatrix

logger = logging.getLogger(__name__)

@dataclass
class ValidationResult:
    is_valid: bool
    issues: List[str]
    warnings: List[str]
    metrics: Dict[str, Any]

class ScenarioValidationService:
    def __init__(self):
        self.max_tiles = 4096  # beyond this the exact pruner is impractical
        self.min_object_px = 2

    def validate_scenario(self, scenario: Scenario) -> ValidationResult:
        """
        Check a scenario for problems that would not stop it loading but would
        make runs meaningless or slow
        """
        issues = []
        warnings = []
        grid = scenario.grid
        metrics = {
            "tiles": grid.tile_count,
            "objects": len(scenario.objects),
            "frames": scenario.n_frames,
        }

        if grid.tile_count > self.max_tiles:
            warnings.append(f"Grid has {grid.tile_count} tiles; exact pruning may hit its time limit")

        ids = [obj.id for obj in scenario.objects]
        if len(ids) != len(set(ids)):
            issues.append("Object ids are not unique")

        for obj in scenario.objects:
            if obj.w < self.min_object_px or obj.h < self.min_object_px:
                warnings.append(f"Object {obj.id} is smaller than {self.min_object_px} px")
            if obj.w > scenario.frame_w or obj.h > scenario.frame_h:
                issues.append(f"Object {obj.id} is larger than the frame")
            if obj.first_frame > scenario.n_frames:
                warnings.append(f"Object {obj.id} never appears (starts after frame {scenario.n_frames})")

        for name, tiles in scenario.regions.items():
            outside = [t for t in tiles if not grid.contains(tuple(t))]
            if outside:
                issues.append(f"Region '{name}' has {len(outside)} tile(s) outside the grid")
            if not tiles:
                warnings.append(f"Region '{name}' is empty")

        return ValidationResult(
            is_valid=len(issues) == 0,
            issues=issues,
            warnings=warnings,
            metrics=metrics,
        )

    def validate_run_inputs(self, scenario: Scenario, cfg: EngineConfig,
                            gaps: Optional[GapMatrix] = None,
                            position_prior: Optional[np.ndarray] = None) -> ValidationResult:
        issues = []
        warnings = []
        if cfg.tolerance is not None and gaps is None:
            issues.append("M_bar is set but no gap matrix was given")
        if cfg.tolerance is None and gaps is not None:
            warnings.append("Gap matrix given but M_bar is none; it will be ignored")
        if gaps is not None:
            if gaps.gaps.shape != scenario.grid.shape:
                issues.append(f"Gap matrix shape {gaps.gaps.shape} does not match grid {scenario.grid.shape}")
            if not set(gaps.gammas) <= set(cfg.gammas):
                warnings.append("Gap matrix was derived from gaps outside the configured set")
            if cfg.tolerance is not None and not math.isnan(gaps.tolerance) and gaps.tolerance != cfg.tolerance:
                warnings.append(f"Gap matrix was derived at M_bar={gaps.tolerance}, config asks for {cfg.tolerance}")
        if position_prior is not None:
            if np.shape(position_prior) != scenario.grid.shape:
                issues.append(f"Position prior shape {np.shape(position_prior)} does not match grid {scenario.grid.shape}")
            if cfg.scorer == "oracle":
                warnings.append("Position prior given but the oracle scorer ignores it")
        elif cfg.scorer == "motion":
            warnings.append("Motion scorer without a position prior; every tile is weighted 1")
        if cfg.sampling_rate > scenario.n_frames:
            warnings.append("Sampling rate exceeds the clip length; only frame 1 is processed")
        return ValidationResult(
            is_valid=len(issues) == 0,
            issues=issues,
            warnings=warnings,
            metrics={"retained_frames": len(range(1, scenario.n_frames + 1, cfg.sampling_rate))},
        )


def load_engine_config(data: Dict[str, Any]) -> EngineConfig:
    """Parse a config JSON mapping, turning validation failures into ConfigError"""
    try:
        return EngineConfig.model_validate(data)
    except ValidationError as e:
        logger.error(f"Rejected engine config: {e.error_count()} error(s)")
        raise ConfigError("invalid engine configuration", details={"errors": e.errors(include_url=False, include_context=False)})
