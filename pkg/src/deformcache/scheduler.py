"""Distance-based out-of-order query scheduling.

A window of up to ``w_d`` pending queries is scanned for the reference point
closest (in L1) to the query just emitted. The window is a FIFO fed in the
batch's original order; each emission pulls in exactly one new query. The
argmin hardware is a time-multiplexed bitonic sorter whose cost is reported
alongside the schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation


@dataclass(frozen=True)
class SchedulerConfig:
    window: int = 512
    parallelism: int = 4
    channels: int = 256
    tie_break: str = "lowest_id"

    def __post_init__(self):
        for name in ("window", "parallelism", "channels"):
            if isinstance(getattr(self, name), bool) or not isinstance(getattr(self, name), int):
                raise ConfigurationError("must be an integer", f"scheduler.{name}")
        if self.window < 1:
            raise ConfigurationError("lookup window must be >= 1", "scheduler.window")
        if self.parallelism < 1:
            raise ConfigurationError("datapath parallelism must be >= 1", "scheduler.parallelism")
        if self.channels < 1:
            raise ConfigurationError("channel count must be >= 1", "scheduler.channels")
        if self.tie_break != "lowest_id":
            raise ConfigurationError(f"unknown tie-break rule {self.tie_break!r}", "scheduler.tie_break")

    @property
    def slack_cycles(self) -> int:
        return math.ceil(self.channels / self.parallelism)


@dataclass(frozen=True)
class SorterCost:
    stages: int
    comparators: int
    fits_in_slack: bool


@dataclass
class Schedule:
    """Execution order over batch positions.

    ``lookahead[i]`` is the position processed at step ``i + 1`` (``-1`` at the
    last step); ``sorter_stages[i]`` is the bitonic depth paid to select the
    query of step ``i``.
    """

    order: np.ndarray
    ids: np.ndarray
    lookahead: np.ndarray
    sorter_stages: np.ndarray

    def __len__(self):
        return int(self.order.shape[0])

    @classmethod
    def from_order(cls, order, ids=None, sorter_stages=None) -> "Schedule":
        order = np.asarray(order, dtype=np.int64)
        n = order.shape[0]
        lookahead = np.full(n, -1, dtype=np.int64)
        lookahead[:-1] = order[1:]
        ids = order.copy() if ids is None else np.asarray(ids, dtype=np.int64)[order]
        stages = np.zeros(n, dtype=np.int64) if sorter_stages is None else np.asarray(sorter_stages)
        return cls(order, ids, lookahead, stages)

    @classmethod
    def identity(cls, n: int, ids=None) -> "Schedule":
        return cls.from_order(np.arange(n), ids)

    def is_permutation(self) -> bool:
        return bool(np.array_equal(np.sort(self.order), np.arange(len(self))))


def l1_distance(p, q) -> float:
    return abs(float(p[0]) - float(q[0])) + abs(float(p[1]) - float(q[1]))


def sorter_cost(occupancy: int, config: SchedulerConfig) -> SorterCost:
    """Bitonic depth ``s(s+1)/2`` (``s = ceil(log2 occupancy)``) on ``ceil(occupancy/2)`` units."""
    if occupancy > config.window:
        raise ContractViolation(f"window occupancy {occupancy} exceeds w_d={config.window}")
    s = max(int(occupancy) - 1, 0).bit_length()
    stages = s * (s + 1) // 2
    return SorterCost(stages, math.ceil(occupancy / 2), stages <= config.slack_cycles)


def dooq_schedule(ref_points, config: SchedulerConfig, ids=None) -> Schedule:
    """Greedy L1 nearest-neighbour chaining inside a sliding lookup window.

    ``ref_points`` is ``(n, 2)`` (a :class:`QueryBatch` is accepted too).
    The chain starts at the first query; ties go to the lowest id.
    """
    if hasattr(ref_points, "ref_points"):
        ids = ref_points.ids if ids is None else ids
        ref_points = ref_points.ref_points
    pts = np.asarray(ref_points, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n < 1:
        raise ContractViolation("cannot schedule an empty batch")
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)

    w_d = config.window
    # the window holds batch positions [0, fill) minus those already emitted,
    # kept in arrival order
    window = list(range(1, min(w_d, n)))
    fill = min(w_d, n)
    order = np.empty(n, dtype=np.int64)
    stages = np.zeros(n, dtype=np.int64)
    order[0] = 0
    if fill < n:
        window.append(fill)
        fill += 1
    current = 0
    for step in range(1, n):
        cand = np.fromiter(window, dtype=np.int64, count=len(window))
        stages[step] = sorter_cost(len(cand), config).stages
        d = np.abs(pts[cand, 0] - pts[current, 0]) + np.abs(pts[cand, 1] - pts[current, 1])
        best = np.flatnonzero(d == d.min())
        pick = best[0] if best.size == 1 else best[np.argmin(ids[cand[best]])]
        current = int(cand[pick])
        order[step] = current
        del window[pick]
        if fill < n:
            window.append(fill)
            fill += 1
    return Schedule.from_order(order, ids, stages)
