"""Command-line entry point: ``fexgraph gen|optimize|redundancy|bench|sweep``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import ALL_MODES, EquivalenceFailure, parse_values, run_benchmark, sweep
from .executor import Mode
from .feature_spec import SpecError, load_model_spec
from .graph import build_naive_graph, identify_redundancy
from .optimizer import dump_graph, optimize
from .workload import (
    bundled_scenario,
    generate_model_spec,
    generate_trace,
    load_scenario,
    load_trace,
)


def parse_duration_ms(text: str) -> int:
    """``"60s"``, ``"500ms"``, ``"2m"``, ``"1h"`` or a bare number of seconds."""
    text = text.strip().lower()
    for suffix, scale in (("ms", 1), ("s", 1000), ("m", 60_000), ("h", 3_600_000)):
        if text.endswith(suffix):
            return int(round(float(text[: -len(suffix)]) * scale))
    return int(round(float(text) * 1000))


def _scenario(ref: str):
    path = Path(ref)
    return load_scenario(path) if path.exists() else bundled_scenario(ref)


def _write_graph(graph, path: str) -> None:
    fmt = "dot" if path.endswith(".dot") else "json"
    Path(path).write_text(dump_graph(graph, fmt), encoding="utf-8")


def cmd_gen(args) -> int:
    scenario = _scenario(args.scenario)
    n = generate_trace(scenario, args.out, args.format)
    print(f"wrote {n} events to {args.out}")
    if args.spec_out:
        from .feature_spec import serialize_model_spec

        Path(args.spec_out).write_text(serialize_model_spec(generate_model_spec(scenario)), encoding="utf-8")
        print(f"wrote model spec to {args.spec_out}")
    return 0


def cmd_optimize(args) -> int:
    spec = load_model_spec(args.spec)
    before = build_naive_graph(spec)
    after = optimize(spec)
    if args.dump_before:
        _write_graph(before, args.dump_before)
    if args.dump_after:
        _write_graph(after, args.dump_after)
    print(f"{len(spec.features)} features: {len(before.nodes)} nodes before, {len(after.nodes)} after")
    return 0


def cmd_redundancy(args) -> int:
    spec = load_model_spec(args.spec)
    report = identify_redundancy(spec)
    print(report.table())
    return 0


def cmd_bench(args) -> int:
    spec = load_model_spec(args.spec)
    log = load_trace(args.trace)
    modes = [Mode.parse(m) for m in args.modes.split(",")] if args.modes else list(ALL_MODES)
    interval = parse_duration_ms(args.interval)
    start = parse_duration_ms(args.start) if args.start else max(f.time_range_s for f in spec.features) * 1000
    times = [start + i * interval for i in range(args.count)]
    try:
        report = run_benchmark(
            spec, log, times, modes, args.report, budget_bytes=args.budget, warmup=args.warmup
        )
    except EquivalenceFailure as exc:
        print(f"EQUIVALENCE FAIL: {exc}", file=sys.stderr)
        return 2
    print(report.table(args.warmup), end="")
    return 0


def cmd_sweep(args) -> int:
    scenario = _scenario(args.scenario)
    rows = sweep(scenario, args.param, parse_values(args.values), output_path=args.report)
    for row in rows:
        print(json.dumps(row))
    return 0 if all(r["equivalence"] == "PASS" for r in rows) else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fexgraph", description="Feature extraction graph benchmark tool")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic event trace")
    g.add_argument("--scenario", required=True, help="scenario JSON file or bundled name (vr_like, video_app, uniform, sweep)")
    g.add_argument("--out", required=True)
    g.add_argument("--format", choices=("log", "ndjson"), default=None, help="default: by extension")
    g.add_argument("--spec-out", help="also write the generated model spec")
    g.set_defaults(func=cmd_gen)

    o = sub.add_parser("optimize", help="build and optimize the extraction graph")
    o.add_argument("--spec", required=True)
    o.add_argument("--dump-before", help=".json or .dot")
    o.add_argument("--dump-after", help=".json or .dot")
    o.set_defaults(func=cmd_optimize)

    r = sub.add_parser("redundancy", help="print the pairwise redundancy report")
    r.add_argument("--spec", required=True)
    r.set_defaults(func=cmd_redundancy)

    b = sub.add_parser("bench", help="run modes over a trace and compare")
    b.add_argument("--spec", required=True)
    b.add_argument("--trace", required=True)
    b.add_argument("--modes", default="naive,fused,cache,full")
    b.add_argument("--interval", default="60s")
    b.add_argument("--start", help="first request time (default: largest feature range)")
    b.add_argument("--count", type=int, default=30)
    b.add_argument("--budget", type=int, default=None, help="cache budget in bytes (default: from spec)")
    b.add_argument("--warmup", type=int, default=0, help="leading requests excluded from the totals")
    b.add_argument("--report", default=None, help="output directory")
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="speedup over a parameter sweep")
    s.add_argument("--param", choices=("redundancy", "interval"), required=True)
    s.add_argument("--values", required=True, help="lo:hi:step or comma list (interval in seconds)")
    s.add_argument("--scenario", default="sweep")
    s.add_argument("--report", default=None)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SpecError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
