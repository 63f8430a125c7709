import math

import numpy as np
import pytest

from services.engine_service import EngineService
from services.exceptions import GapSetError, TileSiftError
from services.gap_service import (
    GapMatrix,
    GapSet,
    MissRateTensor,
    derive_gap_matrix,
    measure_mistracks,
    merge_tensors,
    region_mean_rates,
    sweep_tolerances,
)
from services.grid_service import build_grid
from services.scene_service import Detection, build_preset
from services.tracker_service import TrackRow


def _fast_object():
    """One 10x10 box moving 4 px per frame across a 1x4 tile grid"""
    grid = build_grid(64, 16, 16)
    boxes = {f: (4.0 * (f - 1), 3.0, 4.0 * (f - 1) + 10.0, 13.0) for f in range(1, 10)}
    reference = [TrackRow(f, 1, box) for f, box in boxes.items()]
    detections = {f: [Detection(f, box)] for f, box in boxes.items()}
    return grid, reference, detections


@pytest.fixture
def fast_tensor():
    grid, reference, detections = _fast_object()
    return measure_mistracks(reference, detections, GapSet((1, 2, 4)), grid, 9, tracker="user")


def test_gap_set_validation():
    assert GapSet.parse("1, 2,4").values == (1, 2, 4)
    assert GapSet().max == 16
    with pytest.raises(GapSetError):
        GapSet((2, 4))
    with pytest.raises(GapSetError):
        GapSet((1, 4, 2))
    with pytest.raises(GapSetError):
        GapSet.parse("1,two")


def test_measure_counts_links_at_later_box(fast_tensor):
    # native links land on the tile under the later box centre
    assert fast_tensor.total.tolist() == [[2, 4, 2, 0]]
    assert fast_tensor.missed[0].tolist() == [[0, 0, 0, 0]]
    # every sampled link breaks once the overlap drops below the threshold
    assert fast_tensor.missed[1].tolist() == [[1, 2, 1, 0]]
    assert fast_tensor.missed[2].tolist() == [[0, 1, 1, 0]]


def test_rates_are_laplace_smoothed(fast_tensor):
    rates = fast_tensor.rates
    assert ((rates > 0) & (rates < 1)).all()
    assert fast_tensor.rate(1).tolist() == pytest.approx([[1 / 4, 1 / 6, 1 / 4, 1 / 2]])
    assert fast_tensor.rate(4).tolist() == pytest.approx([[1 / 4, 2 / 6, 2 / 4, 1 / 2]])
    with pytest.raises(GapSetError):
        fast_tensor.rate(8)


def test_derive_gap_matrix_picks_largest_admissible_gap(fast_tensor):
    assert derive_gap_matrix(fast_tensor, 0.3).gaps.tolist() == [[4, 1, 1, 1]]
    assert derive_gap_matrix(fast_tensor, 0.5).gaps.tolist() == [[4, 4, 4, 4]]


def test_zero_tolerance_means_every_frame(fast_tensor):
    assert (derive_gap_matrix(fast_tensor, 0.0).gaps == 1).all()


def test_full_tolerance_means_largest_gap(fast_tensor):
    assert (derive_gap_matrix(fast_tensor, 1.0).gaps == 4).all()


def test_gaps_grow_with_tolerance(fast_tensor):
    matrices = sweep_tolerances(fast_tensor, [i / 10 for i in range(11)])
    for lower, higher in zip(matrices, matrices[1:]):
        assert (lower.gaps <= higher.gaps).all()
    with pytest.raises(TileSiftError):
        sweep_tolerances(fast_tensor, [0.6, 0.4])


def test_gap_matrix_entries_come_from_gap_set():
    with pytest.raises(GapSetError):
        GapMatrix(0.5, (1, 2, 4), np.array([[3]]))


def test_scaled_gaps_never_drop_below_one():
    gaps = GapMatrix(0.5, (1, 2, 4, 8, 16), np.array([[4, 2, 1, 16]]))
    assert gaps.scaled(2).tolist() == [[2, 1, 1, 8]]
    assert gaps.scaled(16).tolist() == [[1, 1, 1, 1]]


def test_uniform_gap_record_keeps_missing_tolerance():
    gaps = GapMatrix(float("nan"), (1, 2, 4), np.full(build_grid(64, 32, 16).shape, 2))
    record = gaps.to_record()
    assert record.tolerance is None
    restored = GapMatrix.from_record(record)
    assert math.isnan(restored.tolerance)
    assert restored.gaps.tolist() == [[2, 2, 2, 2], [2, 2, 2, 2]]


def test_tensor_record_round_trip(fast_tensor):
    restored = MissRateTensor.from_record(fast_tensor.to_record())
    assert restored.gammas == fast_tensor.gammas
    assert np.array_equal(restored.missed, fast_tensor.missed)


def test_merge_sums_counts(fast_tensor):
    merged = merge_tensors([fast_tensor, fast_tensor])
    assert np.array_equal(merged.total, 2 * fast_tensor.total)
    other = MissRateTensor((1, 2), np.zeros((2, 1, 4)), np.zeros((1, 4)))
    with pytest.raises(TileSiftError):
        merge_tensors([fast_tensor, other])
    with pytest.raises(TileSiftError):
        merge_tensors([])


def test_region_mean_rates(fast_tensor):
    means = region_mean_rates(fast_tensor, 1, {"left": [(0, 0), (0, 1)], "none": []})
    assert means["left"] == pytest.approx((1 / 4 + 1 / 6) / 2)
    assert means["none"] == 0.0


def test_braking_lane_mistracks_more_than_steady_lane():
    scenario = build_preset("intersection", seed=0, n_frames=120)
    tensor = EngineService().learn_gap_tensor([scenario], tracker="sort")
    means = region_mean_rates(tensor, 4, scenario.regions)
    assert means["approach"] > means["exit"]


def test_steady_highway_traffic_survives_gaps_up_to_four(presets):
    scenario = presets["highway"]
    tensor = EngineService().learn_gap_tensor([scenario], "sort", GapSet((1, 2, 4)))
    assert tensor.total.sum() > 0
    assert not tensor.missed.any()
