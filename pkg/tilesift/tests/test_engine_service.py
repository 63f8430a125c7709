import dataclasses
import math

import numpy as np
import pytest

from config import get_settings
from schemas import EngineConfig
from services.engine_service import (
    STAGES,
    EngineService,
    deduplicate_padding,
    full_frame_polyomino,
    retained_frames,
)
from services.exceptions import ConfigError
from services.gap_service import GapMatrix, derive_gap_matrix
from services.grid_service import PaddingMode, PaddingSpec, Polyomino, build_grid, pad_polyomino
from services.packer_service import Placement
from services.scene_service import Detection, SceneService, build_preset, learn_position_prior
from services.tracker_service import tracks_to_csv


@pytest.fixture(scope="module")
def engine():
    return EngineService()


@pytest.fixture(scope="module")
def sparse():
    return build_preset("sparse", seed=4, n_frames=96)


def test_retained_frames():
    assert retained_frames(10, 1) == list(range(1, 11))
    assert retained_frames(10, 4) == [1, 5, 9]
    assert retained_frames(3, 16) == [1]


def test_full_frame_polyomino_covers_grid():
    grid = build_grid(64, 32, 16)
    p = full_frame_polyomino(grid, 3)
    assert p.size == grid.tile_count
    assert p.frame_index == 3


def test_reference_run_uses_one_canvas_per_frame(engine, presets):
    scenario = presets["highway"]
    reference = engine.reference_run(scenario)
    assert reference.detector_calls == scenario.n_frames
    assert reference.packing_efficacy == 1.0
    assert reference.pruning_ratio == 0.0
    scene = SceneService(scenario)
    for f in range(1, scenario.n_frames + 1):
        assert sorted(d.box for d in reference.detections.get(f, [])) == sorted(d.box for d in scene.ground_truth(f))


@pytest.mark.parametrize("name", ["highway", "intersection", "sparse"])
def test_degenerate_config_reproduces_reference_tracks(engine, presets, name):
    scenario = presets[name]
    for tracker in ("sort", "user"):
        reference = engine.reference_run(scenario, tracker)
        report = engine.run(scenario, EngineConfig(tracker=tracker))
        assert tracks_to_csv(report.tracks) == tracks_to_csv(reference.tracks)
        assert report.tiles_selected == report.tiles_total
        assert report.pruning_ratio == 0.0


@pytest.mark.parametrize("padding", list(PaddingMode))
def test_padding_does_not_duplicate_detections(engine, presets, padding):
    scenario = presets["intersection"]
    reference = engine.reference_run(scenario)
    report = engine.run(scenario, EngineConfig(padding=padding))
    assert tracks_to_csv(report.tracks) == tracks_to_csv(reference.tracks)


def test_sampling_rate_keeps_every_sth_frame(engine, presets):
    scenario = presets["highway"]
    report = engine.run(scenario, EngineConfig(s=2))
    assert report.frames_retained == math.ceil(scenario.n_frames / 2)
    assert set(report.detections) <= set(retained_frames(scenario.n_frames, 2))
    assert {f for t in report.tracks for f in t.frames} <= set(retained_frames(scenario.n_frames, 2))


def test_sparse_scene_needs_few_detector_calls(engine, sparse):
    reference = engine.reference_run(sparse)
    report = engine.run(sparse, EngineConfig())
    assert report.detector_calls < sparse.n_frames
    assert report.detector_calls <= math.ceil(sparse.n_frames / report.config.window_frames)
    assert report.modeled_throughput_fps > reference.modeled_throughput_fps
    assert tracks_to_csv(report.tracks) == tracks_to_csv(reference.tracks)


def test_pruning_never_adds_detector_calls(engine, sparse):
    tensor = engine.learn_gap_tensor([build_preset("sparse", seed=9, n_frames=96)])
    unpruned = engine.run(sparse, EngineConfig())
    for tolerance in (0.4, 0.6, 0.8):
        gaps = derive_gap_matrix(tensor, tolerance)
        pruned = engine.run(sparse, EngineConfig(M_bar=tolerance), gaps=gaps)
        assert pruned.detector_calls <= unpruned.detector_calls
        assert pruned.tiles_selected <= pruned.tiles_total == unpruned.tiles_total
        assert pruned.solver_fallbacks == 0


def test_unit_gaps_prune_nothing(engine, presets):
    scenario = presets["highway"]
    gaps = GapMatrix(float("nan"), (1, 2, 4, 8, 16), np.ones(scenario.grid.shape))
    report = engine.run(scenario, EngineConfig(M_bar=0.5), gaps=gaps)
    assert report.pruning_ratio == 0.0


def test_pipelined_run_matches_sequential(presets):
    scenario = presets["intersection"]
    cfg = EngineConfig(padding=PaddingMode.HALF_TOP_LEFT)
    sequential = EngineService().run(scenario, cfg)
    pipelined = EngineService(settings=dataclasses.replace(get_settings(), workers=2)).run(scenario, cfg)
    assert pipelined.rows == sequential.rows
    assert pipelined.detector_calls == sequential.detector_calls
    assert pipelined.packing_efficacy == sequential.packing_efficacy


def test_report_record(engine, presets):
    report = engine.run(presets["sparse"], EngineConfig())
    assert set(report.stage_seconds) == set(STAGES)
    record = report.to_record()
    assert record.canvases == report.detector_calls
    assert record.config["s"] == 1
    assert record.config["M_bar"] is None


def test_tolerance_without_gaps_is_rejected(engine, presets):
    with pytest.raises(ConfigError):
        engine.run(presets["sparse"], EngineConfig(M_bar=0.6))


def test_gap_shape_must_match_grid(engine, presets):
    gaps = GapMatrix(0.6, (1, 2), np.ones((2, 2), dtype=int))
    with pytest.raises(ConfigError):
        engine.run(presets["sparse"], EngineConfig(M_bar=0.6), gaps=gaps)


def test_motion_scorer_runs(engine, presets):
    scenario = presets["highway"]
    report = engine.run(scenario, EngineConfig(scorer="motion", T_r=0.1))
    # nothing moves before the first frame
    assert 1 not in report.detections
    assert report.frames_retained == scenario.n_frames


def test_oracle_polyomino_run_with_unit_gaps_keeps_everything(engine, presets):
    scenario = presets["intersection"]
    reference = engine.reference_run(scenario)
    result = engine.oracle_polyomino_run(scenario, np.ones(scenario.grid.shape, dtype=int), reference=reference)
    assert result.pruning_ratio == 0.0
    assert result.rows == reference.rows


def test_oracle_polyomino_run_prunes_with_large_gaps(engine, presets):
    scenario = presets["intersection"]
    result = engine.oracle_polyomino_run(scenario, np.full(scenario.grid.shape, 4))
    assert 0.0 < result.pruning_ratio < 1.0


def test_learn_gap_tensor_shape(engine, presets):
    tensor = engine.learn_gap_tensor([presets["sparse"], presets["highway"]])
    assert tensor.shape == presets["sparse"].grid.shape
    assert tensor.gammas == (1, 2, 4, 8, 16)
    assert tensor.total.sum() > 0
    # sampling every frame breaks no reference link
    assert not tensor.missed[0].any()


def test_deduplicate_padding_prefers_core_tiles():
    grid = build_grid(64, 64, 16)
    spec = PaddingSpec(PaddingMode.FULL)
    left = pad_polyomino(Polyomino(1, ((1, 1),), 0), spec, grid)
    right = pad_polyomino(Polyomino(1, ((1, 2),), 1), spec, grid)
    det = Detection(1, (18.0, 18.0, 28.0, 28.0))  # centred in tile (1, 1)
    cores = {1: [left.core, right.core]}
    unpacked = [(det, Placement(right, (0, 0)), 0), (det, Placement(left, (0, 0)), 1)]
    assert deduplicate_padding(unpacked, grid, cores) == [det]


def test_deduplicate_padding_keeps_earliest_padding_only_detection():
    grid = build_grid(64, 64, 16)
    spec = PaddingSpec(PaddingMode.FULL)
    a = pad_polyomino(Polyomino(1, ((0, 0),), 0), spec, grid)
    b = pad_polyomino(Polyomino(1, ((0, 2),), 1), spec, grid)
    det = Detection(1, (18.0, 2.0, 28.0, 12.0))  # centred in tile (0, 1), no core there
    cores = {1: [a.core, b.core]}
    unpacked = [(det, Placement(b, (0, 0)), 3), (det, Placement(a, (0, 0)), 2)]
    assert deduplicate_padding(unpacked, grid, cores) == [det]


def test_larger_tolerance_never_selects_more_tiles(engine):
    # one window spans the clip, so every run is a single exact solve
    scenario = build_preset("sparse", seed=4, n_frames=24)
    tensor = engine.learn_gap_tensor([build_preset("sparse", seed=9, n_frames=96)])
    selected = [engine.run(scenario, EngineConfig(window_N=24)).tiles_selected]
    for tolerance in (0.4, 0.6, 0.8):
        gaps = derive_gap_matrix(tensor, tolerance)
        report = engine.run(scenario, EngineConfig(M_bar=tolerance, window_N=24), gaps=gaps)
        assert report.solver_fallbacks == 0
        selected.append(report.tiles_selected)
    assert selected == sorted(selected, reverse=True)


class _FrameCountingEngine(EngineService):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.held = []

    def _detect(self, scene, packer, canvases, frames, timings, canvas_sink=None):
        self.held.append(set(frames))
        return super()._detect(scene, packer, canvases, frames, timings, canvas_sink)


@pytest.mark.parametrize("workers", [1, 2])
def test_frames_are_released_with_their_window(presets, workers):
    scenario = presets["highway"]
    engine = _FrameCountingEngine(settings=dataclasses.replace(get_settings(), workers=workers))
    engine.run(scenario, EngineConfig(window_N=16))
    assert len(engine.held) == math.ceil(scenario.n_frames / 16)
    for n, held in enumerate(engine.held):
        assert held <= set(range(16 * n + 1, 16 * n + 17))


def test_canvas_sink_sees_every_canvas(engine, presets):
    rendered = []
    report = engine.run(presets["intersection"], EngineConfig(padding=PaddingMode.FULL), canvas_sink=rendered.append)
    assert [r.canvas.canvas_id for r in rendered] == list(range(report.detector_calls))
    assert [c.canvas_id for c in report.canvas_layouts] == list(range(report.detector_calls))
    ts = presets["intersection"].tile_size
    assert all(r.pixels.shape == (r.canvas.rows * ts, r.canvas.cols * ts) for r in rendered)


def test_position_prior_weights_motion_relevance(engine, presets):
    scenario = presets["highway"]
    cfg = EngineConfig(scorer="motion", T_r=0.1)
    unweighted = engine.run(scenario, cfg)

    silenced = engine.run(scenario, cfg, position_prior=np.zeros(scenario.grid.shape))
    assert silenced.tiles_total == 0
    assert silenced.detector_calls == 0

    # drop the upper lane
    prior = np.ones(scenario.grid.shape)
    prior[:3, :] = 0.0
    lower = engine.run(scenario, cfg, position_prior=prior)
    assert 0 < lower.tiles_total < unweighted.tiles_total
    assert all(i >= 3 for c in lower.canvas_layouts for p in c.placements for i, _ in p.padded.core)

    learned = engine.run(scenario, cfg, position_prior=learn_position_prior(build_preset("highway", seed=8, n_frames=48)))
    assert learned.tiles_total <= unweighted.tiles_total


def test_position_prior_shape_must_match_grid(engine, presets):
    with pytest.raises(ConfigError):
        engine.run(presets["sparse"], EngineConfig(scorer="motion"), position_prior=np.ones((2, 2)))


def test_position_prior_from_several_scenarios(engine):
    a = build_preset("highway", seed=1, n_frames=30)
    b = build_preset("sparse", seed=1, n_frames=30)
    prior = engine.learn_position_prior([a, b], floor=0.2)
    assert np.array_equal(prior, np.maximum(learn_position_prior(a, 0.2), learn_position_prior(b, 0.2)))
    with pytest.raises(ConfigError):
        engine.learn_position_prior([a, build_preset("sparse", seed=1, n_frames=30, tile_size=32)])
