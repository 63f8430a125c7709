from typing import Optional

class TileSiftError(Exception):
    """Base exception for pipeline errors"""
    def __init__(self, message: str, details: Optional[dict] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

class GridMismatchError(TileSiftError):
    """Raised when frame dimensions are not a multiple of the tile size"""
    pass

class FrameRangeError(TileSiftError):
    """Raised when a frame index falls outside the scenario"""
    pass

class TrackerOrderError(TileSiftError):
    """Raised when a tracker receives a non-increasing frame index"""
    pass

class GapSetError(TileSiftError):
    """Raised when a candidate gap set is malformed"""
    pass

class SolverLimitError(TileSiftError):
    """Raised when an instance is too large for the requested solver"""
    pass

class PackingError(TileSiftError):
    """Raised for invalid packing input or statistics"""
    pass

class RenderError(TileSiftError):
    """Raised when a canvas cannot be rendered"""
    pass

class ConfigError(TileSiftError):
    """Raised when an engine configuration violates its invariants"""
    pass

class EvaluationError(TileSiftError):
    """Raised when a metric is undefined for its input"""
    pass

class ArtifactError(TileSiftError):
    """Raised when an artifact file is missing or malformed"""
    pass

class InfeasibleConstraintError(TileSiftError):
    """Raised when no operating point satisfies a selection constraint"""
    pass
