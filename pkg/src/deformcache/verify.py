"""Desk-scale self-check: every fast path against its independent oracle."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import oracles
from .attention import (FeaturePyramid, PyramidDims, QueryBatch, msdeformattn_fused,
                        msdeformattn_reference, random_weights)
from .cache import (CacheGeometry, TimingConfig, footprints, simulate_baseline, simulate_dooq_pingpong,
                    t_stall_analytic)
from .errors import QuantOverflowError
from .fixed_point import (PrecisionPlan, SaturationStats, calibrate_scales, fixed_exp,
                          msdeformattn_fused_quantized, quantized_softmax)
from .scheduler import SchedulerConfig, dooq_schedule
from .workload import DESK_LEVELS, planted_clusters

DEFAULT_SIZES = {
    "instances": 20,      # random kernel instances
    "traces": 100,        # random cache traces / schedules
    "brute_force": 20,    # n=8 exhaustive scheduling instances
    "quant_seeds": 10,
}


@dataclass
class SuiteResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        info = ", ".join(f"{k}={_fmt(v)}" for k, v in self.details.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} ({info}) [{self.seconds:.2f}s]"


@dataclass
class VerifySummary:
    seed: int
    results: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list:
        return [r.line() for r in self.results]


def _fmt(v):
    return format(v, ".4g") if isinstance(v, float) else str(v)


def random_instance(rng: np.random.Generator, channels=None, heads=None, levels=None, points=None,
                    n=None, max_size=12):
    """Random kernel instance with small, irregular level shapes.

    Offsets reach a few pixels past the map border so zero padding is exercised.
    """
    heads = heads or int(rng.choice([1, 2, 4]))
    channels = channels or heads * int(rng.integers(1, 32 // heads + 1))
    levels = levels or int(rng.integers(1, 5))
    points = points or int(rng.integers(1, 5))
    n = n or int(rng.integers(1, 65))
    shapes = [(int(rng.integers(2, max_size + 1)), int(rng.integers(2, max_size + 1)))
              for _ in range(levels)]
    pyramid = FeaturePyramid([rng.uniform(-1, 1, (h, w, channels)) for h, w in shapes])
    offsets = rng.uniform(-0.3, 0.3, (n, heads, levels, points, 2))
    queries = QueryBatch(np.arange(n), rng.uniform(0, 1, (n, 2)), offsets,
                         rng.normal(0, 1.5, (n, heads, levels, points)))
    return pyramid, queries, random_weights(rng, channels, heads)


def max_relative_error(got, want) -> float:
    scale = max(float(np.abs(want).max()), 1e-300)
    return float(np.abs(np.asarray(got) - np.asarray(want)).max()) / scale


def _suite(name, fn, *args):
    t0 = time.perf_counter()
    passed, details = fn(*args)
    return SuiteResult(name, bool(passed), details, time.perf_counter() - t0)


def check_fused(seed: int, sizes: dict):
    rng = np.random.default_rng([seed, 1])
    worst_fused = worst_oracle = 0.0
    for i in range(sizes["instances"]):
        pyramid, queries, weights = random_instance(rng)
        ref = msdeformattn_reference(pyramid, queries, weights).out
        fused = msdeformattn_fused(pyramid, queries, weights).out
        worst_fused = max(worst_fused, max_relative_error(fused, ref))
        if i < 3:
            sub = queries.take(np.arange(min(4, len(queries))))
            loops = oracles.msdeformattn_loops(pyramid, sub, weights)
            worst_oracle = max(worst_oracle, max_relative_error(ref[: len(sub)], loops))
    ok = worst_fused <= 1e-5 and worst_oracle <= 1e-6
    return ok, {"fused_vs_ref": worst_fused, "ref_vs_loops": worst_oracle}


def pade_max_error(points: int = 4001) -> float:
    xs = np.linspace(-20.0, 0.0, points)
    approx = fixed_exp(xs)
    exact = np.array([oracles.exp_decimal(x) for x in xs])
    return float(np.max(np.abs(approx - exact) / exact))


def check_quant(seed: int, sizes: dict, adversarial: bool = False):
    rng = np.random.default_rng([seed, 2])
    plan = PrecisionPlan()
    bit_true = True
    sat_total = 0
    overflow_consistent = True
    sum_err = 0.0
    l2 = []
    for _ in range(sizes["quant_seeds"]):
        pyramid, queries, weights = random_instance(rng, channels=8, heads=2, levels=2, points=2, n=4,
                                                    max_size=8)
        scales = calibrate_scales(pyramid, queries, weights, plan)
        if adversarial:
            # calibrate on the nominal data, then run on inputs 4x louder
            pyramid = FeaturePyramid([4.0 * lvl for lvl in pyramid.levels])
        stats = SaturationStats()
        got = msdeformattn_fused_quantized(pyramid, queries, weights, plan, scales, stats).out
        want, oracle_stats = oracles.fused_quantized_scalar(pyramid, queries, weights, scales)
        bit_true &= bool(np.array_equal(got, want)) and dict(stats.counts) == oracle_stats
        sat_total += stats.total
        try:
            msdeformattn_fused_quantized(pyramid, queries, weights, PrecisionPlan.non_saturating(), scales)
            overflow_consistent &= stats.total == 0
        except QuantOverflowError:
            overflow_consistent &= stats.total > 0
        attn = quantized_softmax(queries.logits, plan)
        sums = attn.values.reshape(attn.values.shape[:-2] + (-1,)).sum(-1) * attn.scale
        sum_err = max(sum_err, float(np.abs(sums - 1.0).max()))
        ref = msdeformattn_fused(pyramid, queries, weights).out
        l2.append(float(np.linalg.norm(got - ref) / np.linalg.norm(ref)))
    pade = pade_max_error()
    ok = bit_true and overflow_consistent and pade <= 3e-4 and sum_err <= 2.0 ** -8
    return ok, {"bit_true": bit_true, "saturations": sat_total, "pade_max_rel": pade,
                "softmax_sum_err": sum_err, "l2_rel_mean": float(np.mean(l2)),
                "l2_target_met": bool(np.mean(l2) <= 1e-2)}


def check_cache(seed: int, sizes: dict):
    rng = np.random.default_rng([seed, 3])
    timing = TimingConfig()
    mismatches = 0
    stall_mismatches = 0
    for _ in range(sizes["traces"]):
        cap = int(rng.integers(4, 65))
        n = int(rng.integers(2, 40))
        fps = [np.unique(rng.integers(0, 3 * cap, int(rng.integers(1, 12)))) for _ in range(n)]
        rep = simulate_baseline(fps, CacheGeometry(cap, "direct_mapped"), timing, record=True)
        naive = oracles.naive_direct_mapped(np.concatenate(fps), cap)
        mismatches += int(not np.array_equal(rep.access_log, np.array(naive, dtype=bool)))

        order = rng.permutation(n)
        analytic = t_stall_analytic(order, fps, timing)
        oracle = oracles.set_difference_stall(order, fps, timing.t_fetch_per_line)
        regions = [fps[p] for p in order]
        sim = simulate_dooq_pingpong(order, fps, regions, CacheGeometry(64), timing, t_comp=0.0)
        stall_mismatches += int(analytic != oracle or sim.steady_stall_cycles != analytic)
    return mismatches == 0 and stall_mismatches == 0, {
        "trace_mismatches": mismatches, "stall_mismatches": stall_mismatches}


def check_bruteforce(seed: int, sizes: dict):
    timing = TimingConfig()
    dims = PyramidDims(DESK_LEVELS, 32)
    ratios = []
    never_worse = True
    for i in range(sizes["brute_force"]):
        pts, offsets = planted_clusters(seed * 1000 + i, dims=dims)
        fps = footprints(pts, offsets, dims)
        dooq = t_stall_analytic(dooq_schedule(pts, SchedulerConfig(window=8, channels=32)), fps, timing)
        ident = t_stall_analytic(np.arange(len(fps)), fps, timing)
        best, _ = oracles.optimal_order_by_exhaustion(fps, timing.t_fetch_per_line)
        never_worse &= dooq <= ident
        ratios.append(dooq / best if best else 1.0)
    mean = float(np.mean(ratios))
    return never_worse and mean <= 1.5, {"mean_ratio": mean, "max_ratio": float(np.max(ratios)),
                                         "never_worse_than_identity": never_worse}


def verify_kernels(seed: int = 0, sizes: dict | None = None, adversarial: bool = False) -> VerifySummary:
    """Run the fused, quantized, cache and brute-force scheduling suites."""
    sz = dict(DEFAULT_SIZES)
    sz.update(sizes or {})
    results = [
        _suite("fused_vs_reference", check_fused, seed, sz),
        _suite("quantized_vs_float", check_quant, seed, sz, adversarial),
        _suite("cache_vs_oracle", check_cache, seed, sz),
        _suite("dooq_vs_bruteforce", check_bruteforce, seed, sz),
    ]
    return VerifySummary(seed, results)
