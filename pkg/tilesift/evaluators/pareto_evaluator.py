# evaluators/pareto_evaluator.py
import csv
import io
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

from schemas import EngineConfig, OperatingPointRecord
from services.exceptions import EvaluationError, InfeasibleConstraintError

logger = logging.getLogger(__name__)

FRONTIER_COLUMNS = ["throughput_fps", "hota", "s", "T_r", "M_bar", "padding", "tracker"]


@dataclass(frozen=True)
class OperatingPoint:
    config: EngineConfig
    throughput: float
    accuracy: float

    def __post_init__(self):
        if not self.throughput > 0:
            raise EvaluationError("throughput must be positive", details={"throughput": self.throughput})

    def dominates(self, other: "OperatingPoint") -> bool:
        return (
            self.throughput >= other.throughput
            and self.accuracy >= other.accuracy
            and (self.throughput > other.throughput or self.accuracy > other.accuracy)
        )

    def to_record(self) -> OperatingPointRecord:
        return OperatingPointRecord(
            config=self.config.model_dump(by_alias=True, mode="json"),
            throughput=self.throughput,
            accuracy=self.accuracy,
        )

    @classmethod
    def from_record(cls, record: OperatingPointRecord) -> "OperatingPoint":
        return cls(EngineConfig.model_validate(record.config), record.throughput, record.accuracy)


class ParetoEvaluator:
    """Non-dominated operating points and constraint-driven selection among them"""

    @staticmethod
    def frontier(points: Sequence[OperatingPoint]) -> List[OperatingPoint]:
        """Points no other point dominates, by throughput ascending (accuracy breaks ties)"""
        kept = [p for p in points if not any(q.dominates(p) for q in points if q is not p)]
        # equal points never dominate each other; keep the first
        unique = []
        seen = set()
        for p in kept:
            key = (p.throughput, p.accuracy)
            if key in seen:
                continue
            seen.add(key)
            unique.append(p)
        return sorted(unique, key=lambda p: (p.throughput, p.accuracy))

    @staticmethod
    def select(frontier: Sequence[OperatingPoint], min_fps: Optional[float] = None,
               max_accuracy_loss: Optional[float] = None, reference: float = 1.0) -> OperatingPoint:
        """
        With min_fps: the most accurate point at or above that throughput.
        With max_accuracy_loss: the fastest point whose accuracy is at least
        (1 - loss) * reference.
        """
        if not frontier:
            raise EvaluationError("frontier is empty")
        if (min_fps is None) == (max_accuracy_loss is None):
            raise EvaluationError("give exactly one of min_fps or max_accuracy_loss")

        if min_fps is not None:
            feasible = [p for p in frontier if p.throughput >= min_fps]
            if not feasible:
                raise InfeasibleConstraintError(
                    f"no configuration reaches {min_fps} fps",
                    details={"best_fps": max(p.throughput for p in frontier)},
                )
            return max(feasible, key=lambda p: (p.accuracy, p.throughput))

        floor = (1.0 - max_accuracy_loss) * reference
        feasible = [p for p in frontier if p.accuracy >= floor - 1e-12]
        if not feasible:
            raise InfeasibleConstraintError(
                f"no configuration keeps accuracy above {floor:.4f}",
                details={"best_accuracy": max(p.accuracy for p in frontier)},
            )
        return max(feasible, key=lambda p: (p.throughput, p.accuracy))


def pareto(points: Sequence[OperatingPoint]) -> List[OperatingPoint]:
    return ParetoEvaluator.frontier(points)


def select(frontier: Sequence[OperatingPoint], min_fps: Optional[float] = None,
           max_accuracy_loss: Optional[float] = None, reference: float = 1.0) -> OperatingPoint:
    return ParetoEvaluator.select(frontier, min_fps, max_accuracy_loss, reference)


def frontier_to_csv(frontier: Sequence[OperatingPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FRONTIER_COLUMNS)
    for p in frontier:
        keys = p.config.table_keys()
        writer.writerow([
            f"{p.throughput:.4f}", f"{p.accuracy:.6f}",
            keys["s"], keys["T_r"], keys["M_bar"], keys["padding"], keys["tracker"],
        ])
    logger.info(f"Frontier with {len(frontier)} points")
    return buf.getvalue()
