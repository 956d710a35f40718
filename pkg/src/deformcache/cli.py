"""Command line: ``run``, ``verify``, ``trace export`` and ``trace replay``."""

from __future__ import annotations

import argparse
import json
import sys

from .config import load_config
from .errors import DeformCacheError
from .experiment import run_experiment
from .report import emit_report
from .tracefile import TraceFile, replay, trace_from_point
from .verify import verify_kernels


def _cmd_run(args) -> int:
    overrides = list(args.set or [])
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.format is not None:
        overrides.append(f"output.format={args.format}")
    config = load_config(args.config, overrides)
    out = args.out or config.output.path
    rows = run_experiment(config)
    emit_report(rows, out, config.output.format,
                meta={"config": str(args.config), "overrides": list(args.set or []),
                      "resolved": config.raw})
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def _cmd_verify(args) -> int:
    sizes = {}
    for item in args.size or []:
        key, _, value = item.partition("=")
        sizes[key] = int(value)
    summary = verify_kernels(args.seed, sizes, adversarial=args.adversarial)
    for line in summary.lines():
        print(line)
    print("all suites passed" if summary.passed else "verification FAILED")
    return 0 if summary.passed else 1


def _cmd_trace_export(args) -> int:
    config = load_config(args.config, list(args.set or []))
    point = config.point(config.sweep.values[args.point]) if args.point is not None else config
    trace = trace_from_point(point, args.seed if args.seed is not None else config.seeds[0])
    trace.save(args.out)
    print(f"wrote trace with {trace.counts['queries']} queries to {args.out}")
    return 0


def _cmd_trace_replay(args) -> int:
    trace = TraceFile.load(args.trace)
    reports = replay(trace)
    for policy, rep in reports.items():
        stored = trace.records.get(policy)
        if stored is not None and stored != rep.access_log.astype(int).tolist():
            print(f"{policy}: replay diverges from the recorded accesses", file=sys.stderr)
            return 1
        print(json.dumps({"policy": policy, **{k: v for k, v in rep.as_dict().items() if k != "policy"}}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deformcache",
                                     description="Deformable-attention cache and scheduling simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a configured sweep and write a report")
    run.add_argument("--config", required=True)
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config field by dotted path (repeatable)")
    run.add_argument("--out", help="report path (default: output.path from the config)")
    run.add_argument("--format", choices=("csv", "jsonl"))
    run.add_argument("--workers", type=int)
    run.set_defaults(func=_cmd_run)

    ver = sub.add_parser("verify", help="check every kernel against its oracle")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--size", action="append", metavar="NAME=N",
                     help="suite size override: instances, traces, brute_force, quant_seeds")
    ver.add_argument("--adversarial", action="store_true",
                     help="drive the quantized path into saturation")
    ver.set_defaults(func=_cmd_verify)

    trace = sub.add_parser("trace", help="export or replay access traces")
    tsub = trace.add_subparsers(dest="trace_command", required=True)
    exp = tsub.add_parser("export", help="simulate one sweep point and save its trace")
    exp.add_argument("--config", required=True)
    exp.add_argument("--set", action="append", metavar="KEY=VALUE")
    exp.add_argument("--point", type=int, help="index into the sweep values")
    exp.add_argument("--seed", type=int)
    exp.add_argument("--out", required=True)
    exp.set_defaults(func=_cmd_trace_export)
    rep = tsub.add_parser("replay", help="re-simulate a saved trace and print both reports")
    rep.add_argument("trace")
    rep.set_defaults(func=_cmd_trace_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DeformCacheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
