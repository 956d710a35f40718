"""Sweep orchestration: workload -> schedules -> both cache policies -> report rows."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .attention import msdeformattn_fused, random_weights
from .cache import (CacheGeometry, check_regions_fit, footprints, prefetch_radii, prefetch_region,
                    simulate_baseline, simulate_dooq_pingpong)
from .config import ExperimentConfig, from_dict
from .errors import ConfigurationError, RejectedInputError
from .fixed_point import PrecisionPlan, SaturationStats, msdeformattn_fused_quantized
from .scheduler import Schedule, dooq_schedule
from .workload import build_workload

SIM_COLUMNS = ("accesses", "hits", "misses", "hit_rate", "fetched_lines", "stall_cycles",
               "covered_cycles", "total_cycles", "energy_pJ")

COLUMNS = (
    ("sweep_parameter", "sweep_value", "seed", "mode", "w_d", "rho", "policy", "n_queries")
    + SIM_COLUMNS
    + ("regional_reuse", "cold_start_cycles", "victim_misses")
    + tuple(f"baseline_{c}" for c in SIM_COLUMNS)
    + ("speedup_vs_baseline", "quant_error", "saturations")
)


@dataclass
class PointResult:
    """Everything computed for one (sweep point, seed); rows are derived from it."""

    row: dict
    schedule: Schedule
    footprints: list
    dooq: object
    baseline: object


def _quant_error(pyramid, queries, config: ExperimentConfig, seed: int):
    sub = queries.take(np.arange(min(len(queries), config.precision.max_queries)))
    weights = random_weights(np.random.default_rng([seed, 11]), pyramid.channels, sub.heads)
    ref = msdeformattn_fused(pyramid, sub, weights).out
    stats = SaturationStats()
    got = msdeformattn_fused_quantized(pyramid, sub, weights, PrecisionPlan(), stats=stats).out
    denom = float(np.linalg.norm(ref))
    err = float(np.linalg.norm(got - ref)) / denom if denom else 0.0
    return err, stats.total


def simulate_point(config: ExperimentConfig, seed: int) -> PointResult:
    """Run one sweep point for one seed. Pure function of ``(config, seed)``."""
    spec = replace(config.workload, seed=seed)
    pyramid, queries, _ = build_workload(spec)
    if len(queries) == 0:
        raise RejectedInputError("empty workload")
    dims = spec.dims
    fps = footprints(queries.ref_points, queries.offsets, dims)
    radii = prefetch_radii(queries.offsets, dims)
    geom = replace(config.geometry, policy="dooq_pingpong")
    try:
        check_regions_fit(radii, dims, geom)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{exc.message} (sweep {config.sweep.parameter}, seed {seed})",
                                 "geometry.capacity_lines") from None

    t_comp = config.timing.compute_cycles(dims.levels, spec.points, spec.channels,
                                          config.scheduler.parallelism)
    schedule = dooq_schedule(queries.ref_points, config.scheduler, queries.ids)
    regions = [prefetch_region(queries.ref_points[p], radii, dims) for p in schedule.order]
    dooq = simulate_dooq_pingpong(schedule, fps, regions, geom, config.timing, t_comp, dims)

    base_geom = CacheGeometry(config.geometry.capacity_lines, "direct_mapped", config.geometry.banks,
                              config.geometry.channels, config.geometry.bytes_per_element)
    baseline = simulate_baseline(fps, base_geom, config.timing, t_comp)

    quant_error, saturations = (None, None)
    if config.precision.enabled:
        quant_error, saturations = _quant_error(pyramid, queries, config, seed)

    row = {
        "sweep_parameter": config.sweep.parameter,
        "sweep_value": None,
        "seed": seed,
        "mode": spec.mode,
        "w_d": config.scheduler.window,
        "rho": spec.rho,
        "policy": dooq.policy,
        "n_queries": len(queries),
    }
    for c in SIM_COLUMNS:
        row[c] = getattr(dooq, c)
        row[f"baseline_{c}"] = getattr(baseline, c)
    row["regional_reuse"] = dooq.regional_reuse
    row["cold_start_cycles"] = dooq.cold_start_cycles
    row["victim_misses"] = dooq.victim_misses
    row["speedup_vs_baseline"] = baseline.total_cycles / dooq.total_cycles if dooq.total_cycles else None
    row["quant_error"] = quant_error
    row["saturations"] = saturations
    return PointResult({c: row[c] for c in COLUMNS}, schedule, fps, dooq, baseline)


def _run_task(task):
    raw, value, seed = task
    config = from_dict(raw)
    row = simulate_point(config.point(value), seed).row
    row["sweep_value"] = value
    return row


def run_experiment(config: ExperimentConfig, workers=None) -> list:
    """One row per sweep value x seed, in sweep-major order regardless of ``workers``."""
    if not config.seeds:
        raise ConfigurationError("at least one seed is required", "seeds")
    # validate every sweep point before any simulation starts
    for value in config.sweep.values:
        config.point(value)
    tasks = [(config.raw, v, s) for v in config.sweep.values for s in config.seeds]
    workers = config.workers if workers is None else workers
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            return list(pool.map(_run_task, tasks))
    return [_run_task(t) for t in tasks]
