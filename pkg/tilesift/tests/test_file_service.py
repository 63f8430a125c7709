import os

import numpy as np
import pytest

from schemas import CanvasSidecar, EngineConfig, Scenario
from services.exceptions import ArtifactError, GridMismatchError
from services.file_service import FileService, make_meta


@pytest.fixture
def files(tmp_path):
    return FileService(str(tmp_path / "ws"))


def test_workspace_layout(files):
    for area in ("scenarios", "artifacts", "runs", "frontiers"):
        assert os.path.isdir(os.path.dirname(files.path(area, "x")))
    with pytest.raises(ArtifactError):
        files.path("cache", "x")


def test_model_round_trip(files, two_object_scenario):
    scenario = two_object_scenario.model_copy(update={"meta": make_meta("simulate", seed=1)})
    path = files.save_model(files.path("scenarios", "two.json"), scenario)
    restored = files.load_model(path, Scenario)
    assert restored == scenario
    assert restored.meta.command == "simulate"
    assert not [n for n in os.listdir(os.path.dirname(path)) if n.startswith(".tmp-")]


def test_config_saved_with_table_names(files):
    path = files.save_model(files.path("runs", "cfg.json"), EngineConfig(s=4, M_bar=0.6))
    data = files.load_json(path)
    assert data["s"] == 4
    assert data["M_bar"] == 0.6
    assert files.load_model(path, EngineConfig) == EngineConfig(s=4, M_bar=0.6)


def test_missing_and_invalid_files(files, tmp_path):
    with pytest.raises(ArtifactError):
        files.load_model(str(tmp_path / "nope.json"), Scenario)
    with pytest.raises(ArtifactError):
        files.load_text(str(tmp_path / "nope.csv"))
    bad = tmp_path / "bad.json"
    bad.write_text('{"frame_w": 100, "frame_h": 96, "tile_size": 16, "n_frames": 1}')
    with pytest.raises(GridMismatchError):
        files.load_model(str(bad), Scenario)
    bad.write_text("{not json")
    with pytest.raises(ArtifactError):
        files.load_json(str(bad))
    with pytest.raises(ArtifactError):
        files.load_model(str(bad), Scenario)


def test_csv_with_meta_sidecar(files):
    path = files.save_csv(files.path("runs", "t.csv"), "frame,track_id\n", make_meta("extract", seed=3))
    assert files.load_text(path) == "frame,track_id\n"
    assert files.load_json(path + ".meta.json")["seed"] == 3


def test_canvas_buffer_and_sidecar(files):
    pixels = np.arange(32 * 48, dtype=np.uint8).reshape(32, 48)
    path = files.save_canvas(files.path("runs", "canvas-0.raw"), 0, pixels)
    sidecar = files.load_model(path + ".json", CanvasSidecar)
    assert (sidecar.width, sidecar.height, sidecar.dtype, sidecar.channels) == (48, 32, "uint8", 1)
    stored = np.fromfile(path, dtype=sidecar.dtype).reshape(sidecar.height, sidecar.width)
    assert np.array_equal(stored, pixels)


def test_json_document(files):
    path = files.save_json(files.path("runs", "summary.json"), {"run": {"frames": 4}, "packing": {"canvases": 0}})
    assert files.load_json(path) == {"run": {"frames": 4}, "packing": {"canvases": 0}}
