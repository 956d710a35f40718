"""Trace-driven feature-cache model.

A cache line is one spatial location ``(level, y, x)`` of the pyramid with its
full ``D``-vector, addressed by the flat id of :class:`PyramidDims`. Two
organizations are modeled:

``direct_mapped``
    the baseline: line ``a`` lives in set ``a mod capacity``; every miss is a
    demand fetch that stalls for ``t_fetch_per_line``.
``dooq_pingpong``
    two half-capacity region buffers. While the core computes step ``i`` out
    of the active buffer, the region of step ``i + 1`` is assembled in the
    other one: lines already resident are carried over, the rest are fetched
    and overlap with compute. Taps outside the active region go through a
    victim path that fetches them one by one without touching the buffers.

Per-access hit rate counts an access as a hit only if the line was on chip
before the step began (carried over, or resident in the direct-mapped
array); lines that had to come from memory for this step are misses even
when the prefetch hid their latency.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .attention import PyramidDims, _bilinear_taps, sample_pixel_coords
from .errors import ConfigurationError

POLICIES = ("direct_mapped", "dooq_pingpong")


@dataclass(frozen=True)
class CacheGeometry:
    capacity_lines: int = 1024
    policy: str = "dooq_pingpong"
    banks: int = 4
    channels: int = 32
    bytes_per_element: int = 1

    def __post_init__(self):
        if self.capacity_lines < 1:
            raise ConfigurationError("capacity must be at least one line", "geometry.capacity_lines")
        if self.policy not in POLICIES:
            raise ConfigurationError(f"unknown policy {self.policy!r}", "geometry.policy")
        if self.policy == "dooq_pingpong" and self.capacity_lines < 2:
            raise ConfigurationError("ping-pong needs two buffers", "geometry.capacity_lines")
        if self.banks < 1:
            raise ConfigurationError("need at least one bank", "geometry.banks")

    @property
    def bytes_per_line(self) -> int:
        return self.channels * self.bytes_per_element

    @property
    def buffer_lines(self) -> int:
        return self.capacity_lines // 2


@dataclass(frozen=True)
class TimingConfig:
    t_fetch_per_line: float = 1.0
    t_comp_per_query: Optional[float] = None
    energy_per_bit: float = 1.21

    def __post_init__(self):
        for name in ("t_fetch_per_line", "energy_per_bit"):
            if not getattr(self, name) > 0:
                raise ConfigurationError("must be positive", f"timing.{name}")
        if self.t_comp_per_query is not None and self.t_comp_per_query < 0:
            raise ConfigurationError("must be non-negative", "timing.t_comp_per_query")

    def compute_cycles(self, levels: int, points: int, channels: int, parallelism: int) -> float:
        """Per-query compute time; defaults to one 2x2 group per ``D/p_d`` slice per sample."""
        if self.t_comp_per_query is not None:
            return float(self.t_comp_per_query)
        return float(levels * points * math.ceil(channels / parallelism))


@dataclass
class SimReport:
    policy: str
    accesses: int
    hits: int
    misses: int
    hit_rate: float
    fetched_lines: int
    stall_cycles: float
    covered_cycles: float
    total_cycles: float
    energy_pJ: float
    regional_reuse: float = 0.0
    cold_start_cycles: float = 0.0
    victim_misses: int = 0
    access_log: Optional[np.ndarray] = None

    @property
    def steady_stall_cycles(self) -> float:
        """Stall after the cold start, i.e. the part comparable to the analytic sum."""
        return self.stall_cycles - self.cold_start_cycles

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("access_log")
        return d


def fetch_energy(fetched_lines: int, geometry: CacheGeometry, timing: TimingConfig) -> float:
    return fetched_lines * geometry.bytes_per_line * 8 * timing.energy_per_bit


def _hit_rate(hits: int, accesses: int) -> float:
    return hits / accesses if accesses else 0.0


# ---------------------------------------------------------------------------
# footprints, regions, banks

def footprints(ref_points, offsets, dims: PyramidDims) -> list:
    """Sorted unique line ids touched by each query (all four taps, in range only)."""
    ref_points = np.asarray(ref_points, dtype=np.float64).reshape(-1, 2)
    n = ref_points.shape[0]
    parts = []
    for lvl, (x, y) in enumerate(sample_pixel_coords(ref_points, offsets, dims)):
        h, w = dims.shapes[lvl]
        base = dims.bases[lvl]
        for _, _, yy, xx, _ in _bilinear_taps(x, y):
            ids = base + yy * w + xx
            ids = np.where((yy >= 0) & (yy < h) & (xx >= 0) & (xx < w), ids, -1)
            parts.append(ids.reshape(n, -1))
    taps = np.concatenate(parts, axis=1) if parts else np.empty((n, 0), dtype=np.int64)
    out = []
    for row in taps:
        u = np.unique(row)
        out.append(u[u >= 0])
    return out


def footprint(query_ref_point, query_offsets, dims: PyramidDims) -> np.ndarray:
    return footprints(np.asarray(query_ref_point)[None], np.asarray(query_offsets)[None], dims)[0]


def prefetch_radii(offsets, dims: PyramidDims) -> list:
    """Per-level radius: ceil of the largest pixel offset magnitude seen, plus one for tap spill."""
    offsets = np.asarray(offsets, dtype=np.float64)
    radii = []
    for lvl, (h, w) in enumerate(dims.shapes):
        if offsets.size == 0:
            radii.append(1)
            continue
        px = np.abs(offsets[:, :, lvl, :, 0]) * (w - 1)
        py = np.abs(offsets[:, :, lvl, :, 1]) * (h - 1)
        radii.append(int(math.ceil(max(px.max(), py.max()))) + 1)
    return radii


def _region_axis(center: float, r: int, size: int) -> np.ndarray:
    lo = max(math.floor(center - r), 0)
    hi = min(math.ceil(center + r), size - 1)
    return np.arange(lo, hi + 1, dtype=np.int64)


def prefetch_region(ref_point, radii: Sequence[int], dims: PyramidDims) -> np.ndarray:
    """Lines inside ``[floor(c - r), ceil(c + r)]`` on both axes of every level, clipped."""
    u, v = float(ref_point[0]), float(ref_point[1])
    parts = []
    for lvl, ((h, w), r) in enumerate(zip(dims.shapes, radii)):
        if r < 0:
            raise ConfigurationError(f"negative prefetch radius at level {lvl}")
        ys = _region_axis(v * (h - 1), r, h)
        xs = _region_axis(u * (w - 1), r, w)
        parts.append((dims.bases[lvl] + ys[:, None] * w + xs[None, :]).ravel())
    return np.concatenate(parts)


def region_level_sizes(region, dims: PyramidDims) -> list:
    levels = np.searchsorted(dims.bases, region, side="right") - 1
    return np.bincount(levels, minlength=dims.levels).tolist()


def check_regions_fit(radii: Sequence[int], dims: PyramidDims, geometry: CacheGeometry):
    """Reject radii whose worst-case region cannot fit in one ping-pong buffer."""
    sizes = [min(2 * r + 2, h) * min(2 * r + 2, w) for (h, w), r in zip(dims.shapes, radii)]
    if sum(sizes) > geometry.buffer_lines:
        lvl = int(np.argmax(sizes))
        raise ConfigurationError(
            f"prefetch region of up to {sum(sizes)} lines exceeds the {geometry.buffer_lines}-line "
            f"ping-pong buffer (largest share: level {lvl}, radius {radii[lvl]}, {sizes[lvl]} lines)",
            "geometry.capacity_lines")


def tap_groups(ref_points, offsets, dims: PyramidDims) -> np.ndarray:
    """``(G, 4, 2)`` array of ``(x, y)`` taps, one 2x2 group per sample."""
    groups = []
    for x, y in sample_pixel_coords(np.asarray(ref_points).reshape(-1, 2), offsets, dims):
        taps = [np.stack([xx.ravel(), yy.ravel()], axis=-1) for _, _, yy, xx, _ in _bilinear_taps(x, y)]
        groups.append(np.stack(taps, axis=1))
    return np.concatenate(groups) if groups else np.empty((0, 4, 2), dtype=np.int64)


def bank_of(x, y, banks: int):
    return (np.asarray(x) + np.asarray(y) * 2) % banks


def bank_conflict_count(groups, banks: int) -> int:
    """Pairs of taps inside the same 2x2 group that map to the same bank."""
    if banks < 1:
        raise ConfigurationError("need at least one bank")
    groups = np.asarray(groups)
    if groups.size == 0:
        return 0
    b = bank_of(groups[..., 0], groups[..., 1], banks)
    total = 0
    for i in range(b.shape[1]):
        for j in range(i + 1, b.shape[1]):
            total += int(np.count_nonzero(b[:, i] == b[:, j]))
    return total


# ---------------------------------------------------------------------------
# analytic stall model

def t_stall_analytic(order, footprint_sets: Sequence[np.ndarray], timing: TimingConfig) -> float:
    """``t_fetch * sum_i |M(next) \\ M(current)|`` along ``order``; no overlap, no capacity."""
    order = getattr(order, "order", order)
    new_lines = 0
    for a, b in zip(order[:-1], order[1:]):
        new_lines += np.setdiff1d(footprint_sets[b], footprint_sets[a], assume_unique=True).size
    return timing.t_fetch_per_line * new_lines


# ---------------------------------------------------------------------------
# simulators

def direct_mapped_hits(stream: np.ndarray, capacity_lines: int) -> np.ndarray:
    """Hit flag per access of a cold direct-mapped cache.

    An access hits iff the previous access to the same set touched the same
    line, which lets the whole stream be evaluated with one stable sort.
    """
    stream = np.asarray(stream, dtype=np.int64)
    if stream.size == 0:
        return np.zeros(0, dtype=bool)
    sets = stream % capacity_lines
    idx = np.argsort(sets, kind="stable")
    s_sorted, a_sorted = sets[idx], stream[idx]
    same = np.zeros(stream.size, dtype=bool)
    same[1:] = (s_sorted[1:] == s_sorted[:-1]) & (a_sorted[1:] == a_sorted[:-1])
    hits = np.empty_like(same)
    hits[idx] = same
    return hits


def simulate_baseline(trace: Sequence[np.ndarray], geometry: CacheGeometry, timing: TimingConfig,
                      t_comp: float = 0.0, record: bool = False) -> SimReport:
    """Direct-mapped cache over per-query footprints in the given order."""
    if geometry.policy != "direct_mapped":
        raise ConfigurationError("simulate_baseline needs a direct_mapped geometry", "geometry.policy")
    stream = np.concatenate(list(trace)) if len(trace) else np.empty(0, dtype=np.int64)
    hit = direct_mapped_hits(stream, geometry.capacity_lines)
    accesses = int(stream.size)
    hits = int(hit.sum())
    misses = accesses - hits
    stall = timing.t_fetch_per_line * misses
    return SimReport(
        policy="direct_mapped", accesses=accesses, hits=hits, misses=misses,
        hit_rate=_hit_rate(hits, accesses), fetched_lines=misses, stall_cycles=stall,
        covered_cycles=0.0, total_cycles=t_comp * len(trace) + stall,
        energy_pJ=fetch_energy(misses, geometry, timing),
        access_log=hit if record else None)


def simulate_dooq_pingpong(order, footprint_sets: Sequence[np.ndarray], regions: Sequence[np.ndarray],
                           geometry: CacheGeometry, timing: TimingConfig, t_comp: float = 0.0,
                           dims: Optional[PyramidDims] = None, record: bool = False) -> SimReport:
    """Region ping-pong buffers driven by a schedule.

    ``footprint_sets`` is indexed by batch position; ``regions[i]`` is the
    region assembled for step ``i`` (during the compute of step ``i - 1``).
    With ``record=True`` the report carries an access log with codes
    0 = carried-over hit, 1 = prefetched this step, 2 = victim fetch.
    """
    order = np.asarray(getattr(order, "order", order), dtype=np.int64)
    if len(regions) != len(order):
        raise ConfigurationError(f"{len(regions)} regions for a {len(order)}-step schedule")
    cap = geometry.buffer_lines
    for step, reg in enumerate(regions):
        if reg.size > cap:
            detail = ""
            if dims is not None:
                sizes = region_level_sizes(reg, dims)
                lvl = int(np.argmax(sizes))
                side = int(math.isqrt(sizes[lvl]))
                detail = f"; level {lvl} holds {sizes[lvl]} lines (radius about {max(side - 2, 0) // 2})"
            raise ConfigurationError(
                f"prefetch region of step {step} has {reg.size} lines, buffer holds {cap}{detail}",
                "geometry.capacity_lines")

    accesses = hits = victims = fetched = carried_total = region_total = 0
    stall = covered = 0.0
    log = [] if record else None
    t_fetch = timing.t_fetch_per_line
    n = len(order)
    cold = 0.0
    active = np.empty(0, dtype=np.int64)
    fresh = np.empty(0, dtype=np.int64)
    if n:
        active = np.unique(regions[0])
        fresh = active
        fetched += active.size
        cold = t_fetch * active.size
    for step in range(n):
        need = footprint_sets[order[step]]
        in_active = np.isin(need, active, assume_unique=True)
        was_fresh = np.isin(need, fresh, assume_unique=True)
        step_hits = int(np.count_nonzero(in_active & ~was_fresh))
        step_victims = int(need.size - np.count_nonzero(in_active))
        accesses += need.size
        hits += step_hits
        victims += step_victims
        if record:
            code = np.where(in_active, np.where(was_fresh, 1, 0), 2)
            log.append(code.astype(np.int8))
        # prefetch of the next region overlaps this step's compute
        if step + 1 < n:
            nxt = np.unique(regions[step + 1])
            new = np.setdiff1d(nxt, active, assume_unique=True)
            region_total += nxt.size
            carried_total += nxt.size - new.size
            fetched += new.size
            fetch_time = t_fetch * new.size
            stall += max(0.0, fetch_time - t_comp)
            covered += min(t_comp, fetch_time)
            active, fresh = nxt, new
    fetched += victims
    victim_stall = t_fetch * victims
    stall_cycles = cold + stall + victim_stall
    return SimReport(
        policy="dooq_pingpong", accesses=accesses, hits=hits, misses=accesses - hits,
        hit_rate=_hit_rate(hits, accesses), fetched_lines=fetched, stall_cycles=stall_cycles,
        covered_cycles=covered, total_cycles=t_comp * n + stall_cycles,
        energy_pJ=fetch_energy(fetched, geometry, timing),
        regional_reuse=carried_total / region_total if region_total else 0.0,
        cold_start_cycles=cold, victim_misses=victims,
        access_log=np.concatenate(log) if record and log else (np.zeros(0, np.int8) if record else None))
