"""Experiment configuration: a versioned YAML document plus dotted-path overrides.

Schema (version 1)::

    version: 1
    seeds: [0, 1, 2]
    workers: 1                  # process pool size for sweep points x seeds
    workload:                   # see WorkloadSpec
      mode: decoder             # dense_encoder | sparse_encoder | decoder
      levels: [[64, 64], [32, 32], [16, 16], [8, 8]]
      channels: 32
      heads: 4
      points: 4
      n_queries: 2048           # decoder mode only
      rho: 1.0                  # sparse_encoder mode only
      distribution: clustered   # uniform | clustered | grid
      clusters: 8
      spread: 0.08
      offset_envelope_px: 2.0
      scores: saliency          # random | saliency
    scheduler: {window: 512, parallelism: 4, tie_break: lowest_id}
    geometry: {capacity_lines: 512, banks: 4, bytes_per_element: 1}
    timing: {t_fetch_per_line: 1.0, t_comp_per_query: null, energy_per_bit: 1.21}
    precision: {enabled: false, max_queries: 64}
    sweep: {parameter: scheduler.window, values: [1, 8, 64, 512]}
    output: {path: report.csv, format: csv}

The channel count of the scheduler and the cache geometry always follows
``workload.channels``. No environment variables are consulted.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .cache import CacheGeometry, TimingConfig
from .errors import ConfigurationError
from .scheduler import SchedulerConfig
from .workload import WorkloadSpec

CONFIG_VERSION = 1
REPORT_FORMATS = ("csv", "jsonl")

DEFAULTS: dict = {
    "version": CONFIG_VERSION,
    "seeds": [0],
    "workers": 1,
    "workload": {
        "mode": "decoder",
        "levels": [[64, 64], [32, 32], [16, 16], [8, 8]],
        "channels": 32,
        "heads": 4,
        "points": 4,
        "n_queries": 2048,
        "rho": 1.0,
        "distribution": "clustered",
        "clusters": 8,
        "spread": 0.08,
        "offset_envelope_px": 2.0,
        "scores": "saliency",
    },
    "scheduler": {"window": 512, "parallelism": 4, "tie_break": "lowest_id"},
    "geometry": {"capacity_lines": 512, "banks": 4, "bytes_per_element": 1},
    "timing": {"t_fetch_per_line": 1.0, "t_comp_per_query": None, "energy_per_bit": 1.21},
    "precision": {"enabled": False, "max_queries": 64},
    "sweep": {"parameter": "scheduler.window", "values": [512]},
    "output": {"path": "report.csv", "format": "csv"},
}

SWEEPABLE = tuple(
    f"workload.{k}" for k in DEFAULTS["workload"] if k != "levels"
) + (
    "workload.levels",
    "scheduler.window", "scheduler.parallelism",
    "geometry.capacity_lines", "geometry.banks", "geometry.bytes_per_element",
    "timing.t_fetch_per_line", "timing.t_comp_per_query", "timing.energy_per_bit",
)


@dataclass(frozen=True)
class PrecisionConfig:
    enabled: bool = False
    max_queries: int = 64


@dataclass(frozen=True)
class SweepConfig:
    parameter: str
    values: tuple


@dataclass(frozen=True)
class OutputConfig:
    path: str
    format: str


@dataclass(frozen=True)
class ExperimentConfig:
    workload: WorkloadSpec
    scheduler: SchedulerConfig
    geometry: CacheGeometry
    timing: TimingConfig
    precision: PrecisionConfig
    sweep: SweepConfig
    seeds: tuple
    output: OutputConfig
    workers: int
    raw: dict

    def point(self, value) -> "ExperimentConfig":
        """This config with the sweep parameter set to ``value``."""
        return from_dict(set_path(self.raw, self.sweep.parameter, value))


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError("unknown key", path)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError("expected a mapping", path)
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_path(raw: dict, dotted: str, value: Any) -> dict:
    out = copy.deepcopy(raw)
    node = out
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigurationError("unknown key", dotted)
        node = node[part]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigurationError("unknown key", dotted)
    node[parts[-1]] = value
    return out


def parse_assignment(text: str):
    """``key.path=value`` with the value parsed as a YAML scalar or list."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key=value")
    key, _, value = text.partition("=")
    return key.strip(), yaml.safe_load(value)


def _build(cls, section: dict, path: str, **extra):
    names = {f.name for f in fields(cls)}
    kwargs = {k: v for k, v in section.items() if k in names}
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        if exc.field:
            raise
        raise ConfigurationError(exc.message, path) from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc), path) from None


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config document must be a mapping")
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigurationError(f"unsupported config version {version!r}", "version")
    raw = _merge(DEFAULTS, data)

    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds:
        raise ConfigurationError("at least one seed is required", "seeds")
    if not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigurationError("seeds must be integers", "seeds")
    if not isinstance(raw["workers"], int) or raw["workers"] < 1:
        raise ConfigurationError("must be a positive integer", "workers")

    sweep = raw["sweep"]
    if sweep["parameter"] not in SWEEPABLE:
        raise ConfigurationError(f"cannot sweep {sweep['parameter']!r}", "sweep.parameter")
    if not isinstance(sweep["values"], list) or not sweep["values"]:
        raise ConfigurationError("sweep needs a non-empty list of values", "sweep.values")
    out = raw["output"]
    if out["format"] not in REPORT_FORMATS:
        raise ConfigurationError(f"unknown report format {out['format']!r}", "output.format")

    wl = raw["workload"]
    workload = _build(WorkloadSpec, {**wl, "levels": tuple(tuple(v) for v in wl["levels"])}, "workload")
    return ExperimentConfig(
        workload=workload,
        scheduler=_build(SchedulerConfig, raw["scheduler"], "scheduler", channels=workload.channels),
        geometry=_build(CacheGeometry, raw["geometry"], "geometry", channels=workload.channels),
        timing=_build(TimingConfig, raw["timing"], "timing"),
        precision=_build(PrecisionConfig, raw["precision"], "precision"),
        sweep=SweepConfig(sweep["parameter"], tuple(sweep["values"])),
        seeds=tuple(seeds),
        output=OutputConfig(str(out["path"]), out["format"]),
        workers=raw["workers"],
        raw=raw,
    )


def load_config(path, overrides: Optional[list] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    return apply_overrides(data, overrides or [])


def apply_overrides(data: dict, overrides: list) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config document must be a mapping")
    raw = _merge(DEFAULTS, data)
    for item in overrides:
        key, value = parse_assignment(item) if isinstance(item, str) else item
        raw = set_path(raw, key, value)
    return from_dict(raw)
