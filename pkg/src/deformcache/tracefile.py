"""Versioned JSON trace files: schedule, footprints and per-access outcomes of one run."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attention import PyramidDims
from .cache import (CacheGeometry, TimingConfig, prefetch_radii, prefetch_region, simulate_baseline,
                    simulate_dooq_pingpong)
from .errors import DataCorruptionError
from .experiment import simulate_point
from .workload import build_workload

TRACE_VERSION = 1


@dataclass
class TraceFile:
    """One simulated run.

    ``schedules`` maps a name (``dooq``, ``identity``) to an order over batch
    positions; ``records`` maps a policy to its per-access outcome codes
    (ping-pong: 0 hit, 1 prefetched, 2 victim; direct-mapped: 1 hit, 0 miss).
    """

    levels: tuple
    channels: int
    schedules: dict
    footprints: list
    ref_points: list
    radii: list
    records: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)
    version: int = TRACE_VERSION

    @property
    def dims(self) -> PyramidDims:
        return PyramidDims(self.levels, self.channels)

    @property
    def counts(self) -> dict:
        return {"queries": len(self.footprints),
                "accesses": int(sum(len(f) for f in self.footprints)),
                "schedules": len(self.schedules)}

    def to_json(self) -> dict:
        return {
            "header": {"version": self.version,
                       "dims": {"levels": [list(l) for l in self.levels], "channels": self.channels},
                       "counts": self.counts},
            "settings": self.settings,
            "body": {"schedules": {k: [int(v) for v in o] for k, o in self.schedules.items()},
                     "footprints": [[int(v) for v in f] for f in self.footprints],
                     "ref_points": [[float(c) for c in p] for p in self.ref_points],
                     "radii": [int(r) for r in self.radii],
                     "records": {k: [int(v) for v in r] for k, r in self.records.items()}},
        }

    @classmethod
    def from_json(cls, data: dict) -> "TraceFile":
        try:
            header, body = data["header"], data["body"]
            version = header["version"]
            if version != TRACE_VERSION:
                raise DataCorruptionError(f"unsupported trace version {version!r}")
            trace = cls(
                levels=tuple(tuple(int(v) for v in l) for l in header["dims"]["levels"]),
                channels=int(header["dims"]["channels"]),
                schedules={k: [int(v) for v in o] for k, o in body["schedules"].items()},
                footprints=[[int(v) for v in f] for f in body["footprints"]],
                ref_points=[[float(c) for c in p] for p in body["ref_points"]],
                radii=[int(r) for r in body["radii"]],
                records={k: [int(v) for v in r] for k, r in body["records"].items()},
                settings=dict(data.get("settings", {})),
                version=version,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataCorruptionError(f"malformed trace file: {exc!r}") from None
        if trace.counts != header.get("counts"):
            raise DataCorruptionError("trace header counts do not match the body")
        return trace

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), separators=(",", ":")) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "TraceFile":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataCorruptionError(f"{path} is not a trace file: {exc}") from None
        return cls.from_json(data)

    def __eq__(self, other):
        return isinstance(other, TraceFile) and self.to_json() == other.to_json()


def trace_from_point(config, seed: int) -> TraceFile:
    """Simulate one sweep point with access logging and package it as a trace."""
    result = simulate_point(config, seed)
    spec = replace(config.workload, seed=seed)
    _, queries, _ = build_workload(spec)
    dims = spec.dims
    radii = prefetch_radii(queries.offsets, dims)
    settings = {"seed": seed, "capacity_lines": config.geometry.capacity_lines,
                "bytes_per_element": config.geometry.bytes_per_element,
                "banks": config.geometry.banks,
                "t_fetch_per_line": config.timing.t_fetch_per_line,
                "energy_per_bit": config.timing.energy_per_bit,
                "t_comp": config.timing.compute_cycles(dims.levels, spec.points, spec.channels,
                                                       config.scheduler.parallelism)}
    trace = TraceFile(spec.levels, spec.channels,
                      {"dooq": result.schedule.order.tolist(), "identity": list(range(len(queries)))},
                      [f.tolist() for f in result.footprints], queries.ref_points.tolist(), radii,
                      settings=settings)
    reports = replay(trace)
    trace.records = {k: r.access_log.astype(int).tolist() for k, r in reports.items()}
    return trace


def replay(trace: TraceFile) -> dict:
    """Re-run both cache policies from the trace alone; returns ``{policy: SimReport}``."""
    s = trace.settings
    dims = trace.dims
    timing = TimingConfig(s.get("t_fetch_per_line", 1.0), None, s.get("energy_per_bit", 1.21))
    t_comp = float(s.get("t_comp", 0.0))
    cap = int(s.get("capacity_lines", 512))
    common = dict(banks=int(s.get("banks", 4)), channels=trace.channels,
                  bytes_per_element=int(s.get("bytes_per_element", 1)))
    fps = [np.asarray(f, dtype=np.int64) for f in trace.footprints]
    order = np.asarray(trace.schedules["dooq"], dtype=np.int64)
    regions = [prefetch_region(trace.ref_points[p], trace.radii, dims) for p in order]
    dooq = simulate_dooq_pingpong(order, fps, regions, CacheGeometry(cap, "dooq_pingpong", **common),
                                  timing, t_comp, dims, record=True)
    ident = trace.schedules.get("identity", list(range(len(fps))))
    base = simulate_baseline([fps[p] for p in ident], CacheGeometry(cap, "direct_mapped", **common),
                             timing, t_comp, record=True)
    return {"dooq_pingpong": dooq, "direct_mapped": base}
