"""Benchmark harness: baselines, ablations, equivalence gate and reports.

Modes:

* ``naive``      one private chain per feature, no cache (industry baseline)
* ``fused``      optimized graph only
* ``cache_only`` naive chains plus the cross-request cache
* ``full``       optimized graph plus cache

All modes run over the same log and request times; every feature value must
agree with ``naive`` before any speedup is reported.
"""

from __future__ import annotations

import json
import math
import os
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

from .cache import EventTypeProfile, profile_event_types
from .event_log import EventLog, encode_payload
from .executor import Engine, ExtractionResult, FeatureError, Mode, OpStats
from .feature_spec import CompFunc, CompKind, FeatureSpec, ModelSpec, normalize
from .workload import (
    WorkloadScenario,
    build_log,
    generate_model_spec,
    generate_records,
    request_times,
)

__all__ = [
    "ALL_MODES",
    "EquivalenceFailure",
    "BenchReport",
    "values_match",
    "first_mismatch",
    "run_mode",
    "run_naive_baseline",
    "run_benchmark",
    "run_scenario",
    "sweep",
    "parse_values",
    "RandomCase",
    "random_case",
    "run_interleaved",
]

ALL_MODES = (Mode.NAIVE, Mode.FUSED, Mode.CACHE_ONLY, Mode.FULL)
REL_TOL = 1e-9


class EquivalenceFailure(AssertionError):
    def __init__(self, diff: dict):
        super().__init__(
            "mode {mode} diverges from naive at request {request_time_ms} on feature "
            "{feature_id}: expected {expected!r}, got {actual!r}".format(**diff)
        )
        self.diff = diff


def values_match(kind: CompKind, a: Any, b: Any, rel: float = REL_TOL) -> bool:
    if isinstance(a, FeatureError) or isinstance(b, FeatureError):
        return isinstance(a, FeatureError) and isinstance(b, FeatureError) and a.kind == b.kind
    if kind in (CompKind.SUM, CompKind.AVG) and isinstance(a, float) and isinstance(b, float):
        return a == b or abs(a - b) <= rel * max(abs(a), abs(b))
    return a == b


def first_mismatch(spec: ModelSpec, ref: ExtractionResult, other: ExtractionResult) -> dict | None:
    if set(ref.values) != set(other.values):
        missing = sorted(set(ref.values) ^ set(other.values))
        return {"feature_id": missing[0], "expected": "present", "actual": "absent", "request_time_ms": ref.request_time_ms}
    for f in spec.features:
        a, b = ref.values[f.feature_id], other.values[f.feature_id]
        if not values_match(f.comp_func.kind, a, b):
            return {"feature_id": f.feature_id, "expected": a, "actual": b, "request_time_ms": ref.request_time_ms}
    return None


def run_mode(
    spec: ModelSpec,
    log: EventLog,
    times: Sequence[int],
    mode: Mode | str,
    *,
    budget_bytes: int | None = None,
    profiles: Sequence[EventTypeProfile] | None = None,
) -> list[ExtractionResult]:
    engine = Engine(spec, log, mode, budget_bytes=budget_bytes, profiles=profiles)
    return [engine.extract(t) for t in times]


def run_naive_baseline(spec: ModelSpec, log: EventLog, schedule: Sequence[int]) -> list[ExtractionResult]:
    """Every feature extracted independently: full retrieve, decode every row, filter, compute."""
    return run_mode(spec, log, schedule, Mode.NAIVE)


def _total(results: Iterable[ExtractionResult]) -> OpStats:
    total = OpStats()
    for r in results:
        total.add(r.stats)
    return total


def _ratio(num: float, den: float) -> float:
    if den == 0:
        return math.inf if num > 0 else 1.0
    return num / den


@dataclass
class BenchReport:
    name: str
    request_times: list[int]
    results: dict[str, list[ExtractionResult]]
    equivalence: str = "UNCHECKED"
    inference_stub_ms: float = 0.0
    mismatch: dict | None = None
    meta: dict = field(default_factory=dict)

    @property
    def modes(self) -> list[str]:
        return list(self.results)

    def totals(self, mode: str, warmup: int = 0) -> OpStats:
        return _total(self.results[mode][warmup:])

    def op_speedup(self, mode: str, warmup: int = 0) -> float:
        """Naive abstract operation cost over ``mode``'s."""
        return _ratio(self.totals("naive", warmup).cost_units, self.totals(mode, warmup).cost_units)

    def wall_ms(self, mode: str, warmup: int = 0) -> float:
        return sum(r.wall_ns for r in self.results[mode][warmup:]) / 1e6

    def wall_speedup(self, mode: str, warmup: int = 0) -> float:
        return _ratio(self.wall_ms("naive", warmup), self.wall_ms(mode, warmup))

    def end_to_end_speedup(self, mode: str, warmup: int = 0) -> float:
        """Extraction wall time plus the fixed inference stub per request."""
        stub = self.inference_stub_ms * len(self.results[mode][warmup:])
        return _ratio(self.wall_ms("naive", warmup) + stub, self.wall_ms(mode, warmup) + stub)

    def reused_fraction(self, mode: str, warmup: int = 1) -> float:
        total = self.totals(mode, warmup)
        return _ratio(total.cache_hit_rows, total.rows_processed)

    def summary(self, warmup: int = 0) -> dict:
        valid = self.equivalence == "PASS"
        out: dict[str, Any] = {
            "name": self.name,
            "requests": len(self.request_times),
            "equivalence": self.equivalence,
            "inference_stub_ms": self.inference_stub_ms,
            "warmup_requests_excluded": warmup,
            "modes": {},
            **self.meta,
        }
        for mode in self.modes:
            t = self.totals(mode, warmup)
            out["modes"][mode] = {
                "rows_retrieved": t.rows_retrieved,
                "decode_calls": t.decode_calls,
                "cache_hit_rows": t.cache_hit_rows,
                "filter_threshold_comparisons": t.filter_threshold_comparisons,
                "cost_units": t.cost_units,
                "wall_ms": self.wall_ms(mode, warmup),
                "op_speedup": self.op_speedup(mode, warmup) if valid and "naive" in self.results else None,
                "wall_speedup": self.wall_speedup(mode, warmup) if valid and "naive" in self.results else None,
                "end_to_end_speedup": self.end_to_end_speedup(mode, warmup) if valid and "naive" in self.results else None,
            }
        return out

    def table(self, warmup: int = 0) -> str:
        s = self.summary(warmup)
        head = f"{'mode':<11}{'retrieved':>11}{'decoded':>10}{'cache hit':>11}{'cmp':>10}{'cost units':>14}{'wall ms':>10}{'op x':>9}{'wall x':>9}{'e2e x':>9}"
        lines = [f"# {self.name}: {s['requests']} requests, equivalence {self.equivalence}", head]
        fmt = lambda v: "n/a" if v is None else f"{v:.2f}"  # noqa: E731
        for mode, m in s["modes"].items():
            lines.append(
                f"{mode:<11}{m['rows_retrieved']:>11}{m['decode_calls']:>10}{m['cache_hit_rows']:>11}"
                f"{m['filter_threshold_comparisons']:>10}{m['cost_units']:>14}{m['wall_ms']:>10.1f}"
                f"{fmt(m['op_speedup']):>9}{fmt(m['wall_speedup']):>9}{fmt(m['end_to_end_speedup']):>9}"
            )
        lines.append(f"(e2e adds a stub inference of {self.inference_stub_ms} ms per request; no model runs)")
        return "\n".join(lines) + "\n"

    def records(self) -> Iterable[dict]:
        for mode, results in self.results.items():
            for i, r in enumerate(results):
                rec = r.to_record()
                rec["mode"] = mode
                rec["request_index"] = i
                yield rec

    def write(self, out_dir: str | os.PathLike, warmup: int = 0) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.table(warmup), encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(self.summary(warmup), indent=2, default=str) + "\n", encoding="utf-8")
        with open(out / "requests.jsonl", "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")


def _check(spec: ModelSpec, results: dict[str, list[ExtractionResult]]) -> dict | None:
    ref = results.get("naive")
    if ref is None:
        return None
    for mode, rs in results.items():
        if mode == "naive":
            continue
        for a, b in zip(ref, rs):
            diff = first_mismatch(spec, a, b)
            if diff is not None:
                diff["mode"] = mode
                return diff
    return None


def run_benchmark(
    spec: ModelSpec,
    log: EventLog,
    times: Sequence[int],
    modes: Iterable[Mode | str] = ALL_MODES,
    output_path: str | os.PathLike | None = None,
    *,
    name: str | None = None,
    budget_bytes: int | None = None,
    warmup: int = 0,
    strict: bool = True,
) -> BenchReport:
    """Run each mode over the same log and request times, then gate on equivalence.

    Raises EquivalenceFailure (``strict``) with the first diverging feature.
    """
    spec = normalize(spec)
    modes = [Mode.parse(m) if isinstance(m, str) else m for m in modes]
    if Mode.NAIVE not in modes:
        modes.insert(0, Mode.NAIVE)
    profiles = profile_event_types(spec, log)
    results = {m.value: run_mode(spec, log, times, m, budget_bytes=budget_bytes, profiles=profiles) for m in modes}
    diff = _check(spec, results)
    report = BenchReport(
        name or spec.model_id,
        list(times),
        results,
        "FAIL" if diff else "PASS",
        spec.inference_stub_ms,
        diff,
    )
    if output_path is not None:
        report.write(output_path, warmup)
    if diff and strict:
        raise EquivalenceFailure(diff)
    return report


def run_scenario(
    scenario: WorkloadScenario,
    modes: Iterable[Mode | str] = ALL_MODES,
    output_path: str | os.PathLike | None = None,
    *,
    spec: ModelSpec | None = None,
    records: list | None = None,
    warmup: int = 0,
) -> BenchReport:
    spec = spec or generate_model_spec(scenario)
    log = build_log(records if records is not None else generate_records(scenario))
    return run_benchmark(spec, log, request_times(scenario), modes, output_path, name=scenario.name, warmup=warmup)


def parse_values(text: str) -> list[float]:
    """``"0:0.9:0.1"`` (inclusive range) or ``"10,30,60"``."""
    if ":" in text:
        lo, hi, step = (float(x) for x in text.split(":"))
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return [round(lo + i * step, 10) for i in range(n)]
    return [float(x) for x in text.split(",") if x.strip()]


def sweep(
    scenario: WorkloadScenario,
    param: str,
    values: Sequence[float],
    *,
    modes: Iterable[Mode | str] = (Mode.NAIVE, Mode.FUSED, Mode.FULL),
    horizon_s: float | None = None,
    warmup: int = 1,
    output_path: str | os.PathLike | None = None,
) -> list[dict]:
    """Speedups over a redundancy or interval sweep, sharing one trace.

    Interval sweeps keep the request horizon fixed; the first ``warmup``
    requests of each run (cold cache) are excluded from the speedups.
    """
    records = generate_records(scenario)
    modes = list(modes)
    horizon = horizon_s if horizon_s is not None else scenario.schedule.interval_s * scenario.schedule.count
    rows = []
    for value in values:
        if param == "redundancy":
            sc = scenario.with_redundancy(value)
        elif param == "interval":
            sc = scenario.with_interval(value)
            sc = replace(sc, schedule=replace(sc.schedule, count=int(horizon // value) + 1))
        else:
            raise ValueError(f"unknown sweep parameter {param!r}")
        report = run_scenario(sc, modes, records=records, warmup=warmup)
        row = {"param": param, "value": value, "equivalence": report.equivalence, "requests": len(report.request_times)}
        for m in report.modes:
            if m == "naive":
                continue
            row[f"{m}_op_speedup"] = report.op_speedup(m, warmup)
            row[f"{m}_wall_speedup"] = report.wall_speedup(m, warmup)
        rows.append(row)
    if output_path is not None:
        out = Path(output_path)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"sweep_{param}.jsonl", "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        keys = [k for k in rows[0] if k.endswith("speedup")] if rows else []
        lines = [f"{param:>12}" + "".join(f"{k:>22}" for k in keys)]
        for row in rows:
            lines.append(f"{row['value']:>12g}" + "".join(f"{row[k]:>22.3f}" for k in keys))
        (out / f"sweep_{param}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows


# -- randomized equivalence cases -----------------------------------------


@dataclass
class RandomCase:
    spec: ModelSpec
    records: list[tuple[int, str, bytes]]
    times: list[int]
    budgets: list[int]
    lookahead_ms: list[int]


_GARBAGE = [b"{not json", b"[1,2]", b'"text"', b"\xff\xfe"]


def random_case(
    seed: int, *, max_features: int = 8, max_types: int = 4, requests: int = 6, max_events: int = 250
) -> RandomCase:
    """Small random (spec, trace, schedule) triple exercising every code path:
    multi-type features, missing attributes, malformed rows, type mismatches,
    equal timestamps, repeated request times and shifting cache budgets."""
    rng = random.Random(seed)
    n_types = rng.randint(1, max_types)
    types = [f"e{i}" for i in range(n_types)]
    vocab = sorted(rng.sample([2, 5, 10, 20, 30, 60, 120], rng.randint(1, 4)))
    feats = []
    for i in range(rng.randint(1, max_features)):
        events = tuple(rng.sample(types, rng.randint(1, min(2, n_types))))
        kind = rng.choice(list(CompKind))
        if kind is CompKind.CONCAT and rng.random() < 0.3:
            attrs = ("x", "s")
        elif kind in (CompKind.SUM, CompKind.AVG, CompKind.MIN, CompKind.MAX):
            attrs = ("s",) if rng.random() < 0.05 else (rng.choice(["x", "y"]),)
        else:
            attrs = (rng.choice(["x", "y", "s", "tags"]),)
        limit = rng.choice([None, 1, 3, 8]) if kind is CompKind.CONCAT else None
        feats.append(FeatureSpec(f"f{i}", events, rng.choice(vocab), attrs, CompFunc(kind, limit)))
    spec = normalize(ModelSpec(f"rand{seed}", tuple(feats), rng.choice([0, 200, 2000, 10**6])))

    times, t = [], rng.randint(0, 30_000)
    for _ in range(requests):
        times.append(t)
        t += rng.choice([0, 500, 1000, 3000, 7000, 20_000, 60_000, rng.randint(1, 90_000)])
    budgets = [rng.choice([0, 100, 500, 2000, 10_000, 10**6]) if rng.random() < 0.3 else -1 for _ in times]
    lookahead = [rng.choice([0, 0, 0, 2000, 10_000]) for _ in times]

    duration_ms = max(rng.randint(20, 300) * 1000, times[-1] + 10_000)
    n_events = rng.randint(0, max_events)
    mean_gap = max(duration_ms / max(n_events, 1), 1.0)
    records = []
    ts = 0
    for _ in range(n_events):
        ts += int(rng.expovariate(1 / mean_gap)) if rng.random() > 0.1 else 0
        if ts > duration_ms:
            break
        name = rng.choice(types)
        if rng.random() < 0.02:
            payload = rng.choice(_GARBAGE)
        else:
            attrs = {}
            if rng.random() > 0.1:
                attrs["x"] = rng.choice([rng.randint(-5, 50), round(rng.uniform(-10, 100), 3)])
            if rng.random() > 0.2:
                attrs["y"] = round(rng.gauss(0, 1e3), 6)
            if rng.random() > 0.1:
                attrs["s"] = rng.choice(["a", "b", "c", "d"])
            if rng.random() > 0.5:
                attrs["tags"] = rng.sample(["p", "q", "r"], rng.randint(0, 3))
            payload = encode_payload(attrs)
        records.append((ts, name, payload))
    return RandomCase(spec, records, times, budgets, lookahead)


def run_interleaved(
    case: RandomCase,
    modes: Sequence[Mode] = ALL_MODES,
    *,
    check_cache: bool = True,
) -> dict[str, list[ExtractionResult]]:
    """Replay a random case with the log growing between requests.

    Before request ``i`` every record up to ``t_i + lookahead_i`` is
    appended, so the log head may lie past the request time. A budget of
    ``-1`` leaves the budget unchanged. Raises EquivalenceFailure on the
    first value divergence from naive and AssertionError on any cache
    invariant breach.
    """
    log = EventLog(validate=False)
    engines = {m.value: Engine(case.spec, log, m) for m in modes}
    out: dict[str, list[ExtractionResult]] = {m: [] for m in engines}
    pending = iter(case.records)
    nxt = next(pending, None)
    for t, budget, ahead in zip(case.times, case.budgets, case.lookahead_ms):
        while nxt is not None and nxt[0] <= t + ahead:
            log.append(nxt[1], nxt[0], nxt[2])
            nxt = next(pending, None)
        for mode, engine in engines.items():
            if budget >= 0:
                engine.set_budget(budget)
                if check_cache and engine.cache is not None:
                    engine.cache.check()
            out[mode].append(engine.extract(t))
            if check_cache and engine.cache is not None:
                engine.cache.check()
        ref = out.get("naive")
        if ref:
            for mode, rs in out.items():
                diff = first_mismatch(case.spec, ref[-1], rs[-1])
                if diff is not None:
                    diff["mode"] = mode
                    raise EquivalenceFailure(diff)
    return out
