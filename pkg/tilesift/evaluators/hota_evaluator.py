# evaluators/hota_evaluator.py
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from schemas import HotaRecord
from services.exceptions import EvaluationError
from services.tracker_service import Track, interpolate_tracks, iou_matrix

logger = logging.getLogger(__name__)

ALPHAS = np.arange(0.05, 0.99, 0.05)
_EPS = np.finfo("float").eps


@dataclass
class HotaScore:
    hota: float
    det_a: float
    ass_a: float
    loc_a: float
    alphas: np.ndarray = field(repr=False)
    hota_per_alpha: np.ndarray = field(repr=False)
    det_a_per_alpha: np.ndarray = field(repr=False)
    ass_a_per_alpha: np.ndarray = field(repr=False)

    def to_record(self) -> HotaRecord:
        return HotaRecord(
            hota=self.hota, det_a=self.det_a, ass_a=self.ass_a, loc_a=self.loc_a,
            alphas=[round(float(a), 2) for a in self.alphas],
            hota_per_alpha=self.hota_per_alpha.tolist(),
            det_a_per_alpha=self.det_a_per_alpha.tolist(),
            ass_a_per_alpha=self.ass_a_per_alpha.tolist(),
        )


def _frame_table(tracks: Sequence[Track]) -> Tuple[Dict[int, Tuple[np.ndarray, np.ndarray]], int]:
    """frame -> (dense id array, boxes); ids are relabelled 0..K-1 in track order"""
    per_frame: Dict[int, Tuple[List[int], List[Tuple[float, ...]]]] = {}
    for dense, track in enumerate(tracks):
        for f, box in track.observations:
            ids, boxes = per_frame.setdefault(f, ([], []))
            ids.append(dense)
            boxes.append(box)
    table = {f: (np.array(ids, dtype=np.int64), boxes) for f, (ids, boxes) in per_frame.items()}
    return table, len(tracks)


class HotaEvaluator:
    """Higher Order Tracking Accuracy of predicted tracks against reference tracks"""

    def __init__(self, alphas: np.ndarray = ALPHAS, interpolate: bool = True):
        self.alphas = np.asarray(alphas, dtype=np.float64)
        self.interpolate = interpolate

    def evaluate(self, predicted: Sequence[Track], reference: Sequence[Track]) -> HotaScore:
        reference = [t for t in reference if t.observations]
        predicted = [t for t in predicted if t.observations]
        if not reference:
            raise EvaluationError("reference tracks are empty")
        if self.interpolate:
            reference = interpolate_tracks(reference)
            predicted = interpolate_tracks(predicted)

        gt_table, n_gt = _frame_table(reference)
        tr_table, n_tr = _frame_table(predicted)
        frames = sorted(set(gt_table) | set(tr_table))
        n_alpha = len(self.alphas)
        empty = (np.zeros(0, dtype=np.int64), [])

        tp = np.zeros(n_alpha)
        fn = np.zeros(n_alpha)
        fp = np.zeros(n_alpha)
        loc = np.zeros(n_alpha)

        if n_tr == 0:
            fn += sum(len(gt_table[f][0]) for f in gt_table)
            return self._finalise(tp, fn, fp, loc, np.zeros(n_alpha))

        similarities = {}
        potential = np.zeros((n_gt, n_tr))
        gt_count = np.zeros((n_gt, 1))
        tr_count = np.zeros((1, n_tr))

        # global alignment between ids, before any one-to-one matching
        for f in frames:
            gt_ids, gt_boxes = gt_table.get(f, empty)
            tr_ids, tr_boxes = tr_table.get(f, empty)
            sim = iou_matrix(gt_boxes, tr_boxes)
            similarities[f] = sim
            denom = sim.sum(0)[np.newaxis, :] + sim.sum(1)[:, np.newaxis] - sim
            sim_iou = np.zeros_like(sim)
            mask = denom > _EPS
            sim_iou[mask] = sim[mask] / denom[mask]
            potential[gt_ids[:, np.newaxis], tr_ids[np.newaxis, :]] += sim_iou
            gt_count[gt_ids] += 1
            tr_count[0, tr_ids] += 1

        global_alignment = potential / (gt_count + tr_count - potential)
        matches = [np.zeros_like(potential) for _ in self.alphas]

        for f in frames:
            gt_ids, _ = gt_table.get(f, empty)
            tr_ids, _ = tr_table.get(f, empty)
            if len(gt_ids) == 0:
                fp += len(tr_ids)
                continue
            if len(tr_ids) == 0:
                fn += len(gt_ids)
                continue
            sim = similarities[f]
            score = global_alignment[gt_ids[:, np.newaxis], tr_ids[np.newaxis, :]] * sim
            rows, cols = linear_sum_assignment(-score)
            for a, alpha in enumerate(self.alphas):
                hit = sim[rows, cols] >= alpha - _EPS
                r, c = rows[hit], cols[hit]
                tp[a] += len(r)
                fn[a] += len(gt_ids) - len(r)
                fp[a] += len(tr_ids) - len(r)
                if len(r):
                    loc[a] += sim[r, c].sum()
                    matches[a][gt_ids[r], tr_ids[c]] += 1

        ass = np.zeros(n_alpha)
        for a in range(n_alpha):
            mc = matches[a]
            ass_per_pair = mc / np.maximum(1, gt_count + tr_count - mc)
            ass[a] = np.sum(mc * ass_per_pair) / np.maximum(1, tp[a])
        return self._finalise(tp, fn, fp, loc, ass)

    def _finalise(self, tp, fn, fp, loc, ass) -> HotaScore:
        det = tp / np.maximum(1, tp + fn + fp)
        hota_alpha = np.sqrt(det * ass)
        loc_a = np.where(tp > 0, loc / np.maximum(1e-10, tp), 1.0)
        score = HotaScore(
            hota=float(hota_alpha.mean()),
            det_a=float(det.mean()),
            ass_a=float(ass.mean()),
            loc_a=float(loc_a.mean()),
            alphas=self.alphas,
            hota_per_alpha=hota_alpha,
            det_a_per_alpha=det,
            ass_a_per_alpha=ass,
        )
        logger.debug(f"HOTA {score.hota:.4f} (DetA {score.det_a:.4f}, AssA {score.ass_a:.4f})")
        return score


def hota(predicted: Sequence[Track], reference: Sequence[Track]) -> HotaScore:
    return HotaEvaluator().evaluate(predicted, reference)
