import math

import numpy as np
import pytest

from evaluators.hota_evaluator import ALPHAS, HotaEvaluator, hota
from services.exceptions import EvaluationError
from services.tracker_service import Track

TOP = (0.0, 0.0, 10.0, 10.0)
BOTTOM = (0.0, 50.0, 10.0, 60.0)


def _static(track_id, box, frames):
    return Track(track_id, [(f, box) for f in frames])


@pytest.fixture
def reference():
    return [_static(1, TOP, range(1, 5)), _static(2, BOTTOM, range(1, 5))]


def test_alpha_grid():
    assert len(ALPHAS) == 19
    assert ALPHAS[0] == pytest.approx(0.05)
    assert ALPHAS[-1] == pytest.approx(0.95)


def test_identical_tracks_score_one(reference):
    score = hota(reference, reference)
    assert score.hota == pytest.approx(1.0)
    assert score.det_a == pytest.approx(1.0)
    assert score.ass_a == pytest.approx(1.0)
    assert score.loc_a == pytest.approx(1.0)


def test_relabelled_ids_score_one(reference):
    relabelled = [Track(9, reference[0].observations), Track(4, reference[1].observations)]
    assert hota(relabelled, reference).hota == pytest.approx(1.0)


def test_identity_swap_halves_association(reference):
    swapped = [
        Track(1, [(1, TOP), (2, TOP), (3, BOTTOM), (4, BOTTOM)]),
        Track(2, [(1, BOTTOM), (2, BOTTOM), (3, TOP), (4, TOP)]),
    ]
    score = hota(swapped, reference)
    assert score.det_a == pytest.approx(1.0)
    assert score.ass_a == pytest.approx(1 / 3)
    assert score.hota == pytest.approx(math.sqrt(1 / 3))


def test_empty_prediction_scores_zero(reference):
    score = hota([], reference)
    assert score.hota == 0.0
    assert score.det_a == 0.0


def test_empty_reference_is_an_error(reference):
    with pytest.raises(EvaluationError):
        hota(reference, [])
    with pytest.raises(EvaluationError):
        hota(reference, [Track(1, [])])


def test_missed_frames():
    ref = [_static(1, TOP, range(1, 5))]
    pred = [_static(1, TOP, range(1, 3))]
    score = hota(pred, ref)
    assert score.det_a == pytest.approx(0.5)
    assert score.ass_a == pytest.approx(0.5)
    assert score.hota == pytest.approx(0.5)


def test_interpolation_fills_sampled_tracks():
    ref = [_static(1, TOP, range(1, 4))]
    pred = [Track(1, [(1, TOP), (3, TOP)])]
    assert HotaEvaluator().evaluate(pred, ref).hota == pytest.approx(1.0)
    raw = HotaEvaluator(interpolate=False).evaluate(pred, ref)
    assert raw.det_a == pytest.approx(2 / 3)
    assert raw.hota == pytest.approx(2 / 3)


def test_localisation_threshold():
    ref = [_static(1, TOP, range(1, 3))]
    # shifted by 2 px: IoU 2/3
    pred = [_static(1, (2.0, 0.0, 12.0, 10.0), range(1, 3))]
    score = hota(pred, ref)
    hits = score.det_a_per_alpha > 0
    assert hits.tolist() == (ALPHAS < 2 / 3).tolist()
    assert score.loc_a < 1.0


def test_record(reference):
    record = hota(reference, reference).to_record()
    assert len(record.alphas) == len(record.hota_per_alpha) == 19
    assert record.alphas[0] == 0.05
    assert np.allclose(record.hota_per_alpha, 1.0)
