import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml

from deformcache.cache import (CacheGeometry, TimingConfig, footprints, prefetch_radii, prefetch_region,
                               simulate_dooq_pingpong)
from deformcache.cli import main
from deformcache.config import from_dict
from deformcache.errors import ConfigurationError, DataCorruptionError
from deformcache.experiment import COLUMNS, run_experiment, simulate_point
from deformcache.report import emit_report, load_report, normalize_rows, render
from deformcache.tracefile import TraceFile, replay, trace_from_point
from deformcache.verify import verify_kernels
from deformcache.workload import FULL_SCALE_LEVELS, build_workload

GOLDEN = Path(__file__).parent / "golden" / "report_columns.txt"

SMALL = {"seeds": [0, 1], "workload": {"n_queries": 120},
         "sweep": {"parameter": "scheduler.window", "values": [1, 4, 16, 64]}}


@pytest.fixture(scope="module")
def small_rows():
    return run_experiment(from_dict(SMALL))


# -- experiment -------------------------------------------------------------

def test_one_row_per_point_and_seed(small_rows):
    assert len(small_rows) == 4 * 2
    assert [(r["sweep_value"], r["seed"]) for r in small_rows] == \
        [(v, s) for v in (1, 4, 16, 64) for s in (0, 1)]
    assert all(list(r) == list(COLUMNS) for r in small_rows)
    for r in small_rows:
        assert r["w_d"] == r["sweep_value"]
        assert r["hits"] + r["misses"] == r["accesses"]
        assert r["speedup_vs_baseline"] == pytest.approx(r["baseline_total_cycles"] / r["total_cycles"])
        assert r["quant_error"] is None


def test_window_one_equals_identity_pingpong():
    cfg = from_dict({**SMALL, "scheduler": {"window": 1}})
    res = simulate_point(cfg, 0)
    spec = replace(cfg.workload, seed=0)
    _, q, _ = build_workload(spec)
    fps = footprints(q.ref_points, q.offsets, spec.dims)
    radii = prefetch_radii(q.offsets, spec.dims)
    regions = [prefetch_region(p, radii, spec.dims) for p in q.ref_points]
    t_comp = TimingConfig().compute_cycles(4, 4, 32, 4)
    ident = simulate_dooq_pingpong(np.arange(len(q)), fps, regions, CacheGeometry(512), TimingConfig(), t_comp)
    assert res.row["hit_rate"] == ident.hit_rate
    assert res.row["total_cycles"] == ident.total_cycles


def test_empty_seeds_rejected_before_work():
    with pytest.raises(ConfigurationError, match="seeds"):
        run_experiment(from_dict({"seeds": []}))


def test_invalid_sweep_value_rejected_up_front():
    cfg = from_dict({"sweep": {"parameter": "scheduler.window", "values": [4, 0]}})
    with pytest.raises(ConfigurationError) as err:
        run_experiment(cfg)
    assert err.value.field == "scheduler.window"


def test_region_overflow_propagates_with_context():
    cfg = from_dict({**SMALL, "geometry": {"capacity_lines": 64}})
    with pytest.raises(ConfigurationError) as err:
        run_experiment(cfg)
    assert err.value.field == "geometry.capacity_lines"
    assert "level" in str(err.value) and "seed 0" in str(err.value)


def test_sweep_isolation(small_rows):
    alone = run_experiment(from_dict({**SMALL, "sweep": {"parameter": "scheduler.window", "values": [16]}}))
    assert alone == [r for r in small_rows if r["sweep_value"] == 16]


def test_parallel_matches_serial(small_rows):
    assert run_experiment(from_dict(SMALL), workers=3) == small_rows


def test_precision_column():
    rows = run_experiment(from_dict({"workload": {"n_queries": 40},
                                     "precision": {"enabled": True, "max_queries": 8}}))
    assert 0 < rows[0]["quant_error"] < 1 and rows[0]["saturations"] >= 0


def test_rho_sweep_counts_at_full_scale_dims():
    cfg = from_dict({"workload": {"mode": "sparse_encoder", "levels": [list(l) for l in FULL_SCALE_LEVELS]}})
    counts = [len(build_workload(replace(cfg.workload, rho=r))[1]) for r in (1.0, 0.5, 0.1)]
    assert counts == [20097, 10049, 2010]


# -- report -----------------------------------------------------------------

def test_single_row_csv_has_header_and_one_line():
    text = render([{"seed": 0, "hit_rate": 1 / 3}])
    lines = text.splitlines()
    assert len(lines) == 2 and lines[0].split(",") == list(COLUMNS)
    assert "0.333333333" in lines[1]


def test_empty_report_rejected(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path / "r.csv")


def test_unwritable_path(tmp_path, small_rows):
    with pytest.raises(OSError):
        emit_report(small_rows, tmp_path / "missing" / "dir" / "r.csv")


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
def test_round_trip(tmp_path, small_rows, fmt):
    path = emit_report(small_rows, tmp_path / f"r.{fmt}", fmt)
    assert load_report(path, fmt) == normalize_rows(small_rows)
    meta = json.loads(Path(str(path) + ".meta.json").read_text())
    assert "created" in meta and meta["rows"] == len(small_rows)


def test_full_scale_columns_match_golden(tmp_path):
    cfg = from_dict({"workload": {"mode": "sparse_encoder", "levels": [list(l) for l in FULL_SCALE_LEVELS]},
                     "sweep": {"parameter": "workload.rho", "values": [0.1]}})
    path = emit_report(run_experiment(cfg), tmp_path / "full.csv")
    header = path.read_text().splitlines()[0].split(",")
    assert header == GOLDEN.read_text().split()


# -- trace files ------------------------------------------------------------

def test_trace_round_trip_and_replay(tmp_path):
    cfg = from_dict({"workload": {"n_queries": 60}, "scheduler": {"window": 16}})
    trace = trace_from_point(cfg, 3)
    path = trace.save(tmp_path / "t.json")
    loaded = TraceFile.load(path)
    assert loaded == trace
    reports = replay(loaded)
    row = simulate_point(cfg, 3).row
    assert reports["dooq_pingpong"].hit_rate == row["hit_rate"]
    assert reports["direct_mapped"].total_cycles == row["baseline_total_cycles"]
    assert loaded.records["dooq_pingpong"] == reports["dooq_pingpong"].access_log.tolist()


def test_trace_version_and_corruption_checks(tmp_path):
    trace = trace_from_point(from_dict({"workload": {"n_queries": 10}}), 0)
    data = trace.to_json()
    data["header"]["version"] = 99
    with pytest.raises(DataCorruptionError, match="version"):
        TraceFile.from_json(data)
    data = trace.to_json()
    data["body"]["footprints"].pop()
    with pytest.raises(DataCorruptionError):
        TraceFile.from_json(data)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(DataCorruptionError):
        TraceFile.load(bad)


# -- verify and CLI ---------------------------------------------------------

def test_verify_default_seed_passes():
    summary = verify_kernels(0, {"instances": 5, "traces": 20, "brute_force": 3, "quant_seeds": 3})
    assert summary.passed
    assert [r.name for r in summary.results] == \
        ["fused_vs_reference", "quantized_vs_float", "cache_vs_oracle", "dooq_vs_bruteforce"]


def test_verify_adversarial_reports_saturation():
    summary = verify_kernels(1, {"instances": 1, "traces": 1, "brute_force": 1, "quant_seeds": 3},
                             adversarial=True)
    quant = summary.results[1]
    assert quant.passed and quant.details["saturations"] > 0


def _write_config(tmp_path, doc):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def test_cli_run_is_byte_deterministic(tmp_path, capsys):
    cfg = _write_config(tmp_path, {**SMALL, "seeds": [0]})
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["run", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(b), "--workers", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_cli_run_overrides_and_jsonl(tmp_path):
    cfg = _write_config(tmp_path, SMALL)
    out = tmp_path / "r.jsonl"
    assert main(["run", "--config", str(cfg), "--set", "seeds=[5]", "--set",
                 "sweep.values=[2]", "--format", "jsonl", "--out", str(out)]) == 0
    rows = load_report(out)
    assert [(r["seed"], r["w_d"]) for r in rows] == [(5, 2)]


def test_cli_reports_config_errors(tmp_path, capsys):
    cfg = _write_config(tmp_path, {"seeds": []})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "x.csv")]) == 2
    assert "seeds" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "none.yaml")]) == 2


def test_cli_verify(capsys):
    code = main(["verify", "--seed", "2", "--size", "instances=2", "--size", "traces=5",
                 "--size", "brute_force=2", "--size", "quant_seeds=2"])
    out = capsys.readouterr().out
    assert code == 0 and out.count("PASS") == 4


def test_cli_trace_export_replay(tmp_path, capsys):
    cfg = _write_config(tmp_path, {"workload": {"n_queries": 30},
                                   "sweep": {"parameter": "scheduler.window", "values": [1, 8]}})
    trace = tmp_path / "t.json"
    assert main(["trace", "export", "--config", str(cfg), "--point", "1", "--seed", "4",
                 "--out", str(trace)]) == 0
    capsys.readouterr()
    assert main(["trace", "replay", str(trace)]) == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert {l["policy"] for l in lines} == {"dooq_pingpong", "direct_mapped"}
    # tampered records are detected
    data = json.loads(trace.read_text())
    data["body"]["records"]["direct_mapped"][0] ^= 1
    trace.write_text(json.dumps(data))
    assert main(["trace", "replay", str(trace)]) == 1
