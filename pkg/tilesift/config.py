import os
from dataclasses import dataclass
from functools import lru_cache

from dotenv import load_dotenv

load_dotenv()


@dataclass(frozen=True)
class Settings:
    workspace: str
    log_level: str
    log_file: str
    detector_cost_s: float  # modeled detector latency per canvas
    classifier_cost_s: float  # modeled relevance scoring latency per retained frame
    solver_time_limit_s: float
    motion_saturation: float
    user_tracker: str
    workers: int


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Read settings from the environment (and .env when present)."""
    return Settings(
        workspace=os.getenv("TILESIFT_WORKSPACE", "./workspace"),
        log_level=os.getenv("TILESIFT_LOG_LEVEL", "INFO"),
        log_file=os.getenv("TILESIFT_LOG_FILE", "tilesift.log"),
        detector_cost_s=float(os.getenv("TILESIFT_DETECTOR_COST_S", 0.05)),
        classifier_cost_s=float(os.getenv("TILESIFT_CLASSIFIER_COST_S", 0.002)),
        solver_time_limit_s=float(os.getenv("TILESIFT_SOLVER_TIME_LIMIT_S", 10.0)),
        motion_saturation=float(os.getenv("TILESIFT_MOTION_SATURATION", 32.0)),
        user_tracker=os.getenv("TILESIFT_USER_TRACKER", ""),
        workers=int(os.getenv("TILESIFT_WORKERS", 1)),
    )
