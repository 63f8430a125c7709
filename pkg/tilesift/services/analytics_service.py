from typing import Dict, Any, List, Mapping, Optional, Sequence
import logging

import numpy as np

from schemas import Scenario
from .engine_service import RunReport
from .grid_service import extract_polyominoes, mask_from_boxes, window_overhead
from .packer_service import Canvas
from .scene_service import Detection, ground_truth_boxes

logger = logging.getLogger(__name__)


class AnalyticsService:

    @staticmethod
    def observation_stats(scenario: Scenario,
                          detections_by_frame: Optional[Mapping[int, Sequence[Detection]]] = None) -> Dict[str, Any]:
        """
        Per-tile relevance and polyomino shape statistics for one clip, from
        ground truth unless detections are given
        """
        grid = scenario.grid
        counts = np.zeros(grid.shape, dtype=np.float64)
        overheads: List[float] = []
        sizes: List[int] = []

        for f in range(1, scenario.n_frames + 1):
            if detections_by_frame is not None:
                boxes = [d.box for d in detections_by_frame.get(f, [])]
            else:
                boxes = [d.box for d in ground_truth_boxes(scenario, f)]
            mask = mask_from_boxes(boxes, grid, f)
            counts += mask.relevant
            for p in extract_polyominoes(mask):
                overheads.append(window_overhead(p))
                sizes.append(p.size)

        relevance = counts / scenario.n_frames
        return {
            "frames": scenario.n_frames,
            "tiles": grid.tile_count,
            "relevance_per_tile": np.round(relevance, 6).tolist(),
            "mean_relevance": float(relevance.mean()),
            "never_relevant_tiles": int((counts == 0).sum()),
            "polyomino_count": len(overheads),
            # undefined without polyominoes; reported as 0
            "mean_window_overhead": float(np.mean(overheads)) if overheads else 0.0,
            "mean_polyomino_size": float(np.mean(sizes)) if sizes else 0.0,
        }

    @staticmethod
    def packing_summary(canvases: Sequence[Canvas]) -> Dict[str, Any]:
        """Occupancy of each canvas and how many frames it mixes"""
        if not canvases:
            return {"canvases": 0, "mean_occupancy": 0.0, "mixed_frame_canvases": 0, "per_canvas": []}

        per_canvas = []
        for canvas in canvases:
            frames = sorted({p.frame_index for p in canvas.placements})
            per_canvas.append({
                "canvas_id": canvas.canvas_id,
                "occupancy": canvas.occupied / (canvas.rows * canvas.cols),
                "placements": len(canvas.placements),
                "frames": frames,
            })
        return {
            "canvases": len(canvases),
            "mean_occupancy": float(np.mean([c["occupancy"] for c in per_canvas])),
            "mixed_frame_canvases": sum(1 for c in per_canvas if len(c["frames"]) > 1),
            "per_canvas": per_canvas,
        }

    @staticmethod
    def run_summary(report: RunReport, reference: Optional[RunReport] = None) -> Dict[str, Any]:
        """Counters of one run with stage shares, and speedup over a reference run when given"""
        total = sum(report.stage_seconds.values())
        shares = {
            stage: (seconds / total if total > 0 else 0.0)
            for stage, seconds in report.stage_seconds.items()
        }
        summary = {
            "frames": report.frames,
            "frames_retained": report.frames_retained,
            "detector_calls": report.detector_calls,
            "calls_per_frame": report.detector_calls / report.frames if report.frames else 0.0,
            "pruning_ratio": report.pruning_ratio,
            "packing_efficacy": report.packing_efficacy,
            "modeled_throughput_fps": report.modeled_throughput_fps,
            "stage_share": shares,
        }
        if reference is not None:
            summary["modeled_speedup"] = report.modeled_throughput_fps / reference.modeled_throughput_fps
            summary["detector_call_reduction"] = 1.0 - report.detector_calls / max(1, reference.detector_calls)
        return summary
