"""
Coverage-constrained polyomino pruning.

Selecting polyominoes is a 0-1 program: minimise the selected tile count so
that every tile, within every run of g consecutive frames (g its maximum
sampling gap), is covered by at least one selected polyomino whenever any
polyomino covers it there.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from schemas import PolyominoRecord, PruneInstanceRecord, PruneSolutionRecord
from .exceptions import SolverLimitError, TileSiftError
from .grid_service import Polyomino, Tile, polyomino_from_tiles

logger = logging.getLogger(__name__)

Key = Tuple[int, int]  # (frame, index within frame)

BRUTEFORCE_LIMIT = 20


@dataclass(frozen=True)
class PruneInstance:
    frame_start: int
    frame_end: int
    polyominoes: Tuple[Polyomino, ...]
    gaps: np.ndarray = field(repr=False)
    last_covered: Mapping[Tile, int] = field(default_factory=dict)

    def __post_init__(self):
        gaps = np.array(self.gaps, dtype=np.int64)
        if gaps.size and gaps.min() < 1:
            raise TileSiftError("gap entries must be at least 1")
        gaps.setflags(write=False)
        object.__setattr__(self, "gaps", gaps)
        polys = tuple(sorted(self.polyominoes, key=lambda p: (p.frame_index, p.index)))
        object.__setattr__(self, "polyominoes", polys)

        seen: Dict[int, set] = {}
        keys = set()
        for p in polys:
            if not self.frame_start <= p.frame_index <= self.frame_end:
                raise TileSiftError("polyomino outside the window", details={"frame": p.frame_index})
            if (p.frame_index, p.index) in keys:
                raise TileSiftError("duplicate polyomino key", details={"key": [p.frame_index, p.index]})
            keys.add((p.frame_index, p.index))
            tiles = seen.setdefault(p.frame_index, set())
            if tiles & p.tile_set:
                raise TileSiftError("polyominoes of one frame overlap", details={"frame": p.frame_index})
            tiles |= p.tile_set

    @property
    def keys(self) -> List[Key]:
        return [(p.frame_index, p.index) for p in self.polyominoes]

    @property
    def total_tiles(self) -> int:
        return sum(p.size for p in self.polyominoes)

    def to_record(self) -> PruneInstanceRecord:
        rows, cols = self.gaps.shape
        return PruneInstanceRecord(
            frame_start=self.frame_start, frame_end=self.frame_end, rows=rows, cols=cols,
            gaps=self.gaps.tolist(),
            polyominoes=[PolyominoRecord.from_polyomino(p) for p in self.polyominoes],
            last_covered={f"{i},{j}": f for (i, j), f in sorted(self.last_covered.items())},
        )

    @classmethod
    def from_record(cls, record: PruneInstanceRecord) -> "PruneInstance":
        counters: Dict[int, int] = {}
        polys = []
        for rec in record.polyominoes:
            k = counters.get(rec.frame, 0)
            counters[rec.frame] = k + 1
            polys.append(polyomino_from_tiles(rec.frame, rec.tiles, index=k))
        last = {tuple(int(v) for v in key.split(",")): f for key, f in record.last_covered.items()}
        return cls(record.frame_start, record.frame_end, tuple(polys), np.array(record.gaps), last)


@dataclass(frozen=True)
class PruneSolution:
    selected: Tuple[Key, ...]
    objective: int
    optimal: bool = True

    def to_record(self) -> PruneSolutionRecord:
        return PruneSolutionRecord(selected=list(self.selected), objective=self.objective, optimal=self.optimal)


def _coverage(inst: PruneInstance) -> Dict[Tile, Dict[int, Key]]:
    cover: Dict[Tile, Dict[int, Key]] = {}
    for p in inst.polyominoes:
        for tile in p.tiles:
            cover.setdefault(tile, {})[p.frame_index] = (p.frame_index, p.index)
    return cover


def build_constraints(inst: PruneInstance) -> List[Tuple[Key, ...]]:
    """
    At-least-one constraints over polyomino keys, deduplicated and sorted.

    Only spans lying wholly inside the window are emitted. A tile last covered
    before the window gets one extra constraint over the rest of its carried
    span, clipped to the window.
    """
    constraints = set()
    for tile, by_frame in _coverage(inst).items():
        g = int(inst.gaps[tile])
        for f in range(inst.frame_start, inst.frame_end - g + 2):
            span = frozenset(by_frame[h] for h in range(f, f + g) if h in by_frame)
            if span:
                constraints.add(span)
        f0 = inst.last_covered.get(tile)
        if f0 is not None and f0 < inst.frame_start:
            lo, hi = max(f0 + 1, inst.frame_start), min(f0 + g, inst.frame_end)
            span = frozenset(by_frame[h] for h in range(lo, hi + 1) if h in by_frame)
            if span:
                constraints.add(span)
    return sorted(tuple(sorted(c)) for c in constraints)


def is_feasible(selected: Iterable[Key], constraints: Sequence[Sequence[Key]]) -> bool:
    chosen = set(selected)
    return all(chosen.intersection(c) for c in constraints)


class _Problem:
    """Constraints over variable indices 0..n-1; index order is key order"""

    def __init__(self, inst: PruneInstance):
        self.keys = inst.keys
        self.index = {k: v for v, k in enumerate(self.keys)}
        self.weights = [p.size for p in inst.polyominoes]
        self.constraints = [frozenset(self.index[k] for k in c) for c in build_constraints(inst)]

    def objective(self, variables: Iterable[int]) -> int:
        return sum(self.weights[v] for v in variables)

    def solution(self, variables: Iterable[int], optimal: bool) -> PruneSolution:
        chosen = sorted(set(variables))
        return PruneSolution(tuple(self.keys[v] for v in chosen), self.objective(chosen), optimal)


def _greedy_cover(constraints: Sequence[FrozenSet[int]], weights: Sequence[int]) -> List[int]:
    """Weighted greedy set cover followed by redundancy removal"""
    uncovered = set(range(len(constraints)))
    hits: Dict[int, set] = {}
    for c_idx, c in enumerate(constraints):
        for v in c:
            hits.setdefault(v, set()).add(c_idx)
    chosen = []
    while uncovered:
        best_v, best_ratio = None, -1.0
        for v in sorted(hits):
            gain = len(hits[v] & uncovered)
            if gain == 0:
                continue
            ratio = gain / weights[v]
            if ratio > best_ratio:
                best_v, best_ratio = v, ratio
        chosen.append(best_v)
        uncovered -= hits[best_v]

    selected = set(chosen)
    for v in sorted(chosen, key=lambda v: (-weights[v], -v)):
        trial = selected - {v}
        if all(trial & c for c in constraints):
            selected = trial
    return sorted(selected)


def solve_greedy(inst: PruneInstance) -> PruneSolution:
    problem = _Problem(inst)
    return problem.solution(_greedy_cover(problem.constraints, problem.weights), optimal=False)


def _reduce(constraints: List[FrozenSet[int]]) -> Tuple[set, List[FrozenSet[int]]]:
    """Select variables of singleton constraints, drop satisfied and superset constraints"""
    forced = set()
    remaining = list(set(constraints))
    while True:
        singles = {next(iter(c)) for c in remaining if len(c) == 1}
        if not singles:
            break
        forced |= singles
        remaining = [c for c in remaining if not (c & forced)]
    remaining.sort(key=lambda c: (len(c), sorted(c)))
    minimal: List[FrozenSet[int]] = []
    for c in remaining:
        if not any(m <= c for m in minimal):
            minimal.append(c)
    return forced, minimal


def _components(constraints: List[FrozenSet[int]]) -> List[List[FrozenSet[int]]]:
    parent: Dict[int, int] = {}

    def find(v):
        while parent.setdefault(v, v) != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for c in constraints:
        members = sorted(c)
        for v in members[1:]:
            a, b = find(members[0]), find(v)
            if a != b:
                parent[max(a, b)] = min(a, b)
    groups: Dict[int, List[FrozenSet[int]]] = {}
    for c in constraints:
        groups.setdefault(find(min(c)), []).append(c)
    return [groups[k] for k in sorted(groups)]


class _SolverTimeout(Exception):
    pass


class _BranchAndBound:
    """
    Include-first depth-first search over variables in ascending index order.

    The first optimum reached is the lexicographically smallest selection,
    so equal-cost leaves found later are pruned.
    """

    def __init__(self, constraints: List[FrozenSet[int]], weights: Sequence[int], deadline: float):
        self.vars = sorted(set().union(*constraints))
        local = {v: i for i, v in enumerate(self.vars)}
        self.weights = [weights[v] for v in self.vars]
        self.constraints = [sorted(local[v] for v in c) for c in constraints]
        self.last_var = [c[-1] for c in self.constraints]
        self.by_var: List[List[int]] = [[] for _ in self.vars]
        for c_idx, c in enumerate(self.constraints):
            for v in c:
                self.by_var[v].append(c_idx)
        self.deadline = deadline
        self.nodes = 0

        upper = _greedy_cover([frozenset(c) for c in self.constraints], self.weights)
        self.best_cost = sum(self.weights[v] for v in upper)
        self.best: Optional[List[int]] = None
        self.fallback = upper

    def _lower_bound(self, depth: int, satisfied: List[int]) -> int:
        used = set()
        bound = 0
        for c_idx, c in enumerate(self.constraints):
            if satisfied[c_idx]:
                continue
            free = [v for v in c if v >= depth]
            if used.isdisjoint(free):
                bound += min(self.weights[v] for v in free)
                used.update(free)
        return bound

    def _admissible(self, cost: int) -> bool:
        if self.best is None:
            return cost <= self.best_cost
        return cost < self.best_cost

    def _search(self, depth: int, cost: int, chosen: List[int], satisfied: List[int]):
        self.nodes += 1
        if self.nodes % 1024 == 0 and time.monotonic() > self.deadline:
            raise _SolverTimeout()
        if not self._admissible(cost + self._lower_bound(depth, satisfied)):
            return
        if depth == len(self.vars):
            self.best = list(chosen)
            self.best_cost = cost
            return

        touched = self.by_var[depth]
        # include
        for c_idx in touched:
            satisfied[c_idx] += 1
        chosen.append(depth)
        self._search(depth + 1, cost + self.weights[depth], chosen, satisfied)
        chosen.pop()
        for c_idx in touched:
            satisfied[c_idx] -= 1
        # exclude, unless a constraint ends here unsatisfied
        if any(self.last_var[c_idx] == depth and not satisfied[c_idx] for c_idx in touched):
            return
        self._search(depth + 1, cost, chosen, satisfied)

    def run(self) -> Tuple[List[int], bool]:
        try:
            self._search(0, 0, [], [0] * len(self.constraints))
        except _SolverTimeout:
            picked = self.best if self.best is not None else self.fallback
            return [self.vars[v] for v in picked], False
        return [self.vars[v] for v in self.best], True


def solve_exact(inst: PruneInstance, time_limit_s: float = 10.0) -> PruneSolution:
    """
    Provably optimal selection with the lexicographically smallest key tuple
    among optima. Falls back to the greedy selection, flagged non-optimal,
    when the time limit expires.
    """
    problem = _Problem(inst)
    deadline = time.monotonic() + time_limit_s
    forced, reduced = _reduce(problem.constraints)
    selected = set(forced)
    optimal = True
    for component in _components(reduced):
        picked, proven = _BranchAndBound(component, problem.weights, deadline).run()
        selected.update(picked)
        optimal = optimal and proven
    if not optimal:
        logger.warning(
            f"Solver time limit hit on window [{inst.frame_start}, {inst.frame_end}]; using best feasible selection"
        )
    return problem.solution(selected, optimal)


def solve_bruteforce(inst: PruneInstance) -> PruneSolution:
    """Exhaustive enumeration; same tie-break as solve_exact"""
    problem = _Problem(inst)
    n = len(problem.keys)
    if n > BRUTEFORCE_LIMIT:
        raise SolverLimitError(f"brute force supports at most {BRUTEFORCE_LIMIT} variables, got {n}",
                               details={"variables": n})
    masks = [sum(1 << v for v in c) for c in problem.constraints]
    best = None
    for bits in range(1 << n):
        if not all(bits & m for m in masks):
            continue
        chosen = tuple(v for v in range(n) if bits >> v & 1)
        candidate = (problem.objective(chosen), chosen)
        if best is None or candidate < best:
            best = candidate
    return problem.solution(best[1], optimal=True)


SOLVERS = {
    "exact": solve_exact,
    "greedy": lambda inst, time_limit_s=None: solve_greedy(inst),
    "bruteforce": lambda inst, time_limit_s=None: solve_bruteforce(inst),
}


class WindowedPruner:
    """
    Solves consecutive windows of one stream, carrying each tile's last
    selected covering frame into the next window's boundary constraints.
    """

    def __init__(self, gaps: np.ndarray, solver: str = "exact", time_limit_s: float = 10.0):
        if solver not in SOLVERS:
            raise TileSiftError(f"unknown solver '{solver}'", details={"solvers": list(SOLVERS)})
        self.gaps = np.asarray(gaps, dtype=np.int64)
        self.solver = solver
        self.time_limit_s = time_limit_s
        self.last_covered: Dict[Tile, int] = {}
        self.fallbacks = 0
        self.windows = 0

    def solve_window(self, frame_start: int, frame_end: int, polyominoes: Sequence[Polyomino]) -> PruneSolution:
        inst = PruneInstance(frame_start, frame_end, tuple(polyominoes), self.gaps, dict(self.last_covered))
        solution = SOLVERS[self.solver](inst, time_limit_s=self.time_limit_s)
        self.windows += 1
        if self.solver == "exact" and not solution.optimal:
            self.fallbacks += 1
        if not solution.optimal and not is_feasible(solution.selected, build_constraints(inst)):
            raise SolverLimitError("solver returned a selection that leaves a span uncovered",
                                   details={"window": [frame_start, frame_end], "solver": self.solver})

        by_key = {(p.frame_index, p.index): p for p in inst.polyominoes}
        for key in solution.selected:
            p = by_key[key]
            for tile in p.tiles:
                if self.last_covered.get(tile, 0) < p.frame_index:
                    self.last_covered[tile] = p.frame_index
        logger.debug(
            f"Window [{frame_start}, {frame_end}]: kept {solution.objective}/{inst.total_tiles} tiles"
        )
        return solution
