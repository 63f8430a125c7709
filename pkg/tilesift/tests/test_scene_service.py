import numpy as np
import pytest

from schemas import ObjectSpec, Scenario
from services.exceptions import FrameRangeError, TileSiftError
from services.analytics_service import AnalyticsService
from services.grid_service import PaddingSpec, Polyomino, extract_polyominoes, mask_from_boxes, pad_polyomino
from services.packer_service import Canvas, pack, render
from services.scene_service import (
    PRESETS,
    SceneService,
    build_preset,
    ground_truth_boxes,
    learn_position_prior,
    motion_relevance,
    object_box,
    oracle_detect_canvas,
    oracle_relevance,
    synthesize_frame,
)


def test_object_box_interpolates_and_snaps():
    obj = ObjectSpec(id=1, w=10, h=6, waypoints=[(1, 10.0, 10.0), (5, 30.0, 10.0)])
    assert object_box(obj, 1, 64, 64) == (5.0, 7.0, 15.0, 13.0)
    assert object_box(obj, 3, 64, 64) == (15.0, 7.0, 25.0, 13.0)
    assert object_box(obj, 6, 64, 64) is None


def test_object_box_clipped_to_frame():
    obj = ObjectSpec(id=1, w=10, h=10, waypoints=[(1, 2.0, 2.0)])
    assert object_box(obj, 1, 64, 64) == (0.0, 0.0, 7.0, 7.0)


def test_waypoints_must_increase():
    with pytest.raises(ValueError):
        ObjectSpec(id=1, w=4, h=4, waypoints=[(3, 0, 0), (2, 1, 1)])


def test_ground_truth_frame_range(two_object_scenario):
    assert len(ground_truth_boxes(two_object_scenario, 1)) == 2
    with pytest.raises(FrameRangeError):
        ground_truth_boxes(two_object_scenario, 0)
    with pytest.raises(FrameRangeError):
        synthesize_frame(two_object_scenario, 13)


def test_synthesized_frame_draws_objects(two_object_scenario):
    frame = synthesize_frame(two_object_scenario, 1)
    assert frame.pixels.shape == (64, 64)
    assert frame.pixels.dtype == np.uint8
    x1, y1, x2, y2 = (int(v) for v in ground_truth_boxes(two_object_scenario, 1)[0].box)
    assert (frame.pixels[y1:y2, x1:x2] == 200).all()
    assert frame.pixels[y2, x1] != 200


def test_frames_are_deterministic(two_object_scenario):
    a = synthesize_frame(two_object_scenario, 4)
    b = synthesize_frame(two_object_scenario, 4)
    assert np.array_equal(a.pixels, b.pixels)


def test_oracle_relevance_marks_overlapped_tiles(two_object_scenario):
    grid = two_object_scenario.grid
    scores = oracle_relevance(two_object_scenario, 1, grid)
    # boxes (3,5)-(13,15) and (47,45)-(57,55)
    assert np.argwhere(scores.scores == 1.0).tolist() == [[0, 0], [2, 2], [2, 3], [3, 2], [3, 3]]
    assert set(np.unique(scores.scores).tolist()) == {0.0, 1.0}


def test_motion_relevance_first_frame_is_zero(two_object_scenario):
    grid = two_object_scenario.grid
    cur = synthesize_frame(two_object_scenario, 1)
    scores = motion_relevance(None, cur, grid, np.ones(grid.shape))
    assert not scores.scores.any()


def test_motion_relevance_follows_movement(two_object_scenario):
    grid = two_object_scenario.grid
    prev = synthesize_frame(two_object_scenario, 1)
    cur = synthesize_frame(two_object_scenario, 2)
    scores = motion_relevance(prev, cur, grid, np.ones(grid.shape))
    moving = set(map(tuple, np.argwhere(scores.scores > 0).tolist()))
    oracle = set(map(tuple, np.argwhere(oracle_relevance(two_object_scenario, 2, grid).scores > 0).tolist()))
    assert moving and moving <= oracle | set(map(tuple, np.argwhere(oracle_relevance(two_object_scenario, 1, grid).scores > 0).tolist()))
    # the position prior can silence tiles
    silenced = motion_relevance(prev, cur, grid, np.zeros(grid.shape))
    assert not silenced.scores.any()


def test_motion_relevance_noise_is_seeded(two_object_scenario):
    grid = two_object_scenario.grid
    prev = synthesize_frame(two_object_scenario, 1)
    cur = synthesize_frame(two_object_scenario, 2)
    a = motion_relevance(prev, cur, grid, np.ones(grid.shape), noise_seed=5, noise_amplitude=0.1)
    b = motion_relevance(prev, cur, grid, np.ones(grid.shape), noise_seed=5, noise_amplitude=0.1)
    assert np.array_equal(a.scores, b.scores)
    assert a.scores.min() >= 0.0 and a.scores.max() <= 1.0


def test_position_prior(two_object_scenario):
    prior = learn_position_prior(two_object_scenario, floor=0.1)
    assert set(np.unique(prior).tolist()) <= {0.1, 1.0}
    assert prior[0, 0] == 1.0


@pytest.mark.parametrize("name", PRESETS)
def test_presets_are_deterministic(name):
    a = build_preset(name, seed=7, n_frames=40)
    b = build_preset(name, seed=7, n_frames=40)
    assert a.model_dump_json() == b.model_dump_json()
    assert a.objects


def test_preset_rejects_bad_input():
    with pytest.raises(TileSiftError):
        build_preset("roundabout")
    with pytest.raises(TileSiftError):
        build_preset("sparse", n_frames=0)


def test_sparse_preset_is_sparse():
    scenario = build_preset("sparse", seed=0, n_frames=120)
    assert AnalyticsService.observation_stats(scenario)["mean_relevance"] <= 0.05


def test_intersection_regions_lie_on_their_lanes():
    scenario = build_preset("intersection", seed=0, n_frames=60)
    grid = scenario.grid
    assert set(scenario.regions) == {"approach", "exit"}
    for tiles in scenario.regions.values():
        assert tiles and all(grid.contains(tuple(t)) for t in tiles)
    approach_rows = {t[0] for t in scenario.regions["approach"]}
    exit_rows = {t[0] for t in scenario.regions["exit"]}
    assert approach_rows.isdisjoint(exit_rows)


def test_scene_service_matches_module_functions(two_object_scenario):
    scene = SceneService(two_object_scenario)
    for f in (1, 6, 12):
        assert scene.ground_truth(f) == ground_truth_boxes(two_object_scenario, f)
        assert np.array_equal(scene.frame(f).pixels, synthesize_frame(two_object_scenario, f).pixels)
        assert np.array_equal(scene.oracle_scores(f).scores, oracle_relevance(two_object_scenario, f, scene.grid).scores)
    with pytest.raises(FrameRangeError):
        scene.frame(13)


def test_oracle_detector_translates_into_canvas(two_object_scenario):
    scenario = two_object_scenario
    grid = scenario.grid
    boxes = [d.box for d in ground_truth_boxes(scenario, 1)]
    polys = extract_polyominoes(mask_from_boxes(boxes, grid, 1))
    canvases = pack([pad_polyomino(p, PaddingSpec(), grid) for p in polys], grid.rows, grid.cols)
    frames = {1: synthesize_frame(scenario, 1)}
    detections = []
    for canvas in canvases:
        detections.extend(oracle_detect_canvas(render(canvas, frames), scenario))
    assert len(detections) == 2
    # the 2x2 polyomino is placed first at (0, 0), so its object moves up-left by 32 px
    boxes = sorted(d.box for d in detections)
    assert (15.0, 13.0, 25.0, 23.0) in boxes


def test_oracle_detector_ignores_unrendered_objects(two_object_scenario):
    grid = two_object_scenario.grid
    canvas = Canvas.empty(0, grid.rows, grid.cols, grid.tile_size)
    assert oracle_detect_canvas(canvas, two_object_scenario) == []


def test_empty_scenario_has_no_relevance(empty_scenario):
    assert AnalyticsService.observation_stats(empty_scenario)["never_relevant_tiles"] == empty_scenario.grid.tile_count
    assert isinstance(empty_scenario, Scenario)


def test_oracle_detector_clips_to_rendered_tiles():
    # the box reaches into tile (0, 1), which the L-shaped footprint leaves out
    scenario = Scenario(
        seed=0, frame_w=64, frame_h=64, tile_size=16, n_frames=2,
        objects=[ObjectSpec(id=1, w=20, h=8, waypoints=[(1, 14.0, 8.0), (2, 14.0, 8.0)])],
    )
    grid = scenario.grid
    assert ground_truth_boxes(scenario, 1)[0].box == (4.0, 4.0, 24.0, 12.0)
    poly = Polyomino(1, ((0, 0), (1, 0), (1, 1)))
    canvas = pack([pad_polyomino(poly, PaddingSpec(), grid)], grid.rows, grid.cols)[0]
    rendered = render(canvas, {1: synthesize_frame(scenario, 1)})
    detections = oracle_detect_canvas(rendered, scenario)
    assert [d.box for d in detections] == [(4.0, 4.0, 16.0, 12.0)]
    x1, y1, x2, y2 = (int(v) for v in detections[0].box)
    assert (rendered.pixels[y1:y2, x1:x2] == 200).all()
