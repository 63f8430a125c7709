import os

# keep test runs from writing a log file into the working directory
os.environ.setdefault("TILESIFT_LOG_FILE", "")

import pytest

from schemas import ObjectSpec, Scenario
from services.scene_service import build_preset

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def presets():
    """Short clips of every scene family, built once per session"""
    return {
        name: build_preset(name, seed=3, n_frames=48)
        for name in ("highway", "intersection", "sparse")
    }


@pytest.fixture
def empty_scenario():
    return Scenario(seed=0, frame_w=64, frame_h=64, tile_size=16, n_frames=5)


@pytest.fixture
def two_object_scenario():
    """Two objects crossing a 64x64 frame in opposite directions, far apart vertically"""
    return Scenario(
        seed=1, frame_w=64, frame_h=64, tile_size=16, n_frames=12,
        objects=[
            ObjectSpec(id=1, w=10, h=10, waypoints=[(1, 8, 10), (12, 52, 10)]),
            ObjectSpec(id=2, w=10, h=10, waypoints=[(1, 52, 50), (12, 8, 50)]),
        ],
    )
