"""Synthetic workloads: behavior traces, feature sets and request schedules.

A scenario file is JSON::

    {
      "name": "video_app", "seed": 7, "duration_s": 7200, "arrival": "poisson",
      "event_types": [{"name": "short_video", "rate_per_10min": 5.0,
                       "numeric_attrs": 4, "text_attrs": 2, "list_attrs": 1,
                       "pad_bytes": [64, 256], "missing_rate": 0.05}],
      "features": {"num_features": 20, "redundancy": 0.5,
                   "ranges_s": [60, 300, 3600], "multi_event_fraction": 0.1},
      "schedule": {"kind": "fixed", "interval_s": 60, "start_s": 3600, "count": 30},
      "cache_budget_bytes": 1048576, "inference_stub_ms": 0.0
    }

Every event carries ``dur`` (number) and ``item`` (text) so features spanning
several event types always have a shared attribute to read.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from .event_log import EventLog
from .feature_spec import CompFunc, CompKind, FeatureSpec, ModelSpec, normalize

__all__ = [
    "EventTypeSpec",
    "FeatureGenSpec",
    "Schedule",
    "WorkloadScenario",
    "load_scenario",
    "bundled_scenario",
    "bundled_model",
    "generate_records",
    "generate_trace",
    "build_log",
    "load_trace",
    "generate_model_spec",
    "request_times",
]

ZIPF_EXPONENT = 1.1
ITEM_VOCAB = 50


@dataclass(frozen=True)
class EventTypeSpec:
    name: str
    rate_per_10min: float
    numeric_attrs: int = 3
    text_attrs: int = 2
    list_attrs: int = 1
    pad_bytes: tuple[int, int] = (0, 0)
    missing_rate: float = 0.0

    @property
    def rate_per_s(self) -> float:
        return self.rate_per_10min / 600.0

    @property
    def numeric_names(self) -> list[str]:
        return ["dur"] + [f"n{i}" for i in range(1, self.numeric_attrs + 1)]

    @property
    def text_names(self) -> list[str]:
        return ["item"] + [f"t{i}" for i in range(1, self.text_attrs + 1)]

    @property
    def list_names(self) -> list[str]:
        return [f"l{i}" for i in range(1, self.list_attrs + 1)]


@dataclass(frozen=True)
class FeatureGenSpec:
    num_features: int = 20
    redundancy: float = 0.5
    ranges_s: tuple[int, ...] = (60, 300, 3600, 86400)
    multi_event_fraction: float = 0.1
    num_event_types: int | None = None
    mismatch_fraction: float = 0.0


@dataclass(frozen=True)
class Schedule:
    kind: str = "fixed"
    interval_s: float = 60.0
    start_s: float | None = None
    count: int = 10
    burst_size: int = 3
    burst_gap_s: float = 5.0


@dataclass(frozen=True)
class WorkloadScenario:
    name: str
    seed: int
    duration_s: int
    event_types: tuple[EventTypeSpec, ...]
    features: FeatureGenSpec = field(default_factory=FeatureGenSpec)
    schedule: Schedule = field(default_factory=Schedule)
    arrival: str = "poisson"
    cache_budget_bytes: int = 1 << 20
    inference_stub_ms: float = 0.0

    def __post_init__(self):
        if self.arrival not in ("poisson", "uniform"):
            raise ValueError(f"unknown arrival process {self.arrival!r}")
        for et in self.event_types:
            if et.rate_per_10min <= 0:
                raise ValueError(f"{et.name}: rate must be positive")
        if not 0.0 <= self.features.redundancy <= 1.0:
            raise ValueError("redundancy must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "WorkloadScenario":
        ets = tuple(
            EventTypeSpec(**{**e, "pad_bytes": tuple(e.get("pad_bytes", (0, 0)))}) for e in raw["event_types"]
        )
        fg = raw.get("features", {})
        fg = FeatureGenSpec(**{**fg, "ranges_s": tuple(fg.get("ranges_s", FeatureGenSpec.ranges_s))})
        rest = {k: v for k, v in raw.items() if k not in ("event_types", "features", "schedule")}
        return cls(event_types=ets, features=fg, schedule=Schedule(**raw.get("schedule", {})), **rest)

    def with_redundancy(self, redundancy: float) -> "WorkloadScenario":
        return replace(self, features=replace(self.features, redundancy=redundancy))

    def with_interval(self, interval_s: float) -> "WorkloadScenario":
        return replace(self, schedule=replace(self.schedule, interval_s=interval_s))


def load_scenario(path: str | os.PathLike) -> WorkloadScenario:
    with open(path, encoding="utf-8") as fh:
        return WorkloadScenario.from_dict(json.load(fh))


def _data_file(name: str):
    path = resources.files("fexgraph").joinpath("data").joinpath(name)
    if not path.is_file():
        known = sorted(p.name for p in resources.files("fexgraph").joinpath("data").iterdir() if p.name.endswith(".json"))
        raise ValueError(f"no bundled file {name!r}; available: {', '.join(known)}")
    return path


def bundled_scenario(name: str) -> WorkloadScenario:
    """Scenario shipped with the package (``video_app``, ``vr_like``, ``uniform``, ...)."""
    return WorkloadScenario.from_dict(json.loads(_data_file(f"{name}.scenario.json").read_text("utf-8")))


def bundled_model(name: str) -> ModelSpec:
    from .feature_spec import parse_model_spec

    return parse_model_spec(_data_file(f"{name}.model.json").read_text("utf-8"))


# -- traces --------------------------------------------------------------


def _arrivals(rng: np.random.Generator, rate_per_s: float, duration_s: float, process: str) -> np.ndarray:
    if process == "uniform":
        n = int(round(rate_per_s * duration_s))
        return np.sort(rng.uniform(0.0, duration_s, size=n))
    # Poisson process via exponential gaps
    expected = rate_per_s * duration_s
    gaps = rng.exponential(1.0 / rate_per_s, size=int(expected + 10 * np.sqrt(expected) + 10))
    times = np.cumsum(gaps)
    while times[-1] < duration_s:
        more = np.cumsum(rng.exponential(1.0 / rate_per_s, size=len(gaps))) + times[-1]
        times = np.concatenate([times, more])
    return times[times < duration_s]


def _payload(rng: np.random.Generator, et: EventTypeSpec) -> dict:
    attrs: dict = {}
    for name in et.numeric_names:
        attrs[name] = round(float(rng.gamma(2.0, 15.0)), 3)
    for i, name in enumerate(et.text_names):
        attrs[name] = f"{name}_{int(rng.zipf(1.5)) % ITEM_VOCAB if i == 0 else int(rng.integers(0, 8))}"
    for name in et.list_names:
        attrs[name] = [f"tag{int(t)}" for t in rng.integers(0, 20, size=int(rng.integers(0, 4)))]
    if et.missing_rate > 0:
        for name in list(attrs):
            if rng.random() < et.missing_rate:
                del attrs[name]
    lo, hi = et.pad_bytes
    if hi > 0:
        n = int(rng.integers(lo, hi + 1))
        attrs["ctx"] = "x" * n
    return attrs


def generate_records(scenario: WorkloadScenario) -> list[tuple[int, str, dict]]:
    """Time-sorted ``(timestamp_ms, event_name, attrs)`` records for the scenario."""
    merged = []
    for idx, et in enumerate(scenario.event_types):
        rng = np.random.default_rng([scenario.seed, idx])
        times = _arrivals(rng, et.rate_per_s, scenario.duration_s, scenario.arrival)
        for ts in times:
            merged.append((int(ts * 1000), idx, _payload(rng, et)))
    merged.sort(key=lambda r: (r[0], r[1]))
    return [(ts, scenario.event_types[idx].name, attrs) for ts, idx, attrs in merged]


def build_log(records: Iterable[tuple[int, str, dict]], path: str | os.PathLike | None = None) -> EventLog:
    log = EventLog(path)
    for ts, name, attrs in records:
        log.append(name, ts, attrs)
    return log


def generate_trace(scenario: WorkloadScenario, out: str | os.PathLike, fmt: str | None = None) -> int:
    """Write the scenario trace; ``fmt`` is ``log`` (binary segment) or ``ndjson``."""
    out = Path(out)
    fmt = fmt or ("ndjson" if out.suffix in (".ndjson", ".jsonl") else "log")
    records = generate_records(scenario)
    if out.exists():
        out.unlink()
    if fmt == "ndjson":
        with open(out, "w", encoding="utf-8") as fh:
            for ts, name, attrs in records:
                fh.write(json.dumps({"timestamp_ms": ts, "event_name": name, "payload": attrs}, sort_keys=True, separators=(",", ":")) + "\n")
    elif fmt == "log":
        build_log(records, out).close()
    else:
        raise ValueError(f"unknown trace format {fmt!r}")
    return len(records)


def load_trace(path: str | os.PathLike) -> EventLog:
    """Open a binary log, or import an NDJSON trace into an in-memory log."""
    from .event_log import import_trace

    path = Path(path)
    if path.suffix in (".ndjson", ".jsonl"):
        log = EventLog()
        import_trace(path, log)
        return log
    return EventLog(path)


# -- feature sets --------------------------------------------------------

_FUNC_WEIGHTS = [
    (CompKind.COUNT, 0.2),
    (CompKind.SUM, 0.15),
    (CompKind.AVG, 0.2),
    (CompKind.MIN, 0.075),
    (CompKind.MAX, 0.075),
    (CompKind.DISTINCT_COUNT, 0.15),
    (CompKind.CONCAT, 0.15),
]


def _zipf_probs(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** ZIPF_EXPONENT
    return w / w.sum()


def generate_model_spec(scenario: WorkloadScenario, model_id: str | None = None) -> ModelSpec:
    """Feature set with controlled redundancy over the scenario's event types.

    Every draw is made regardless of the redundancy level, so sweeping it
    only changes which features take their pooled range. A feature's pooled
    range is the widest fresh range among features sharing its event type
    (the min over its types when it spans several); pooling therefore
    widens ranges without widening any type's fused retrieval.
    """
    fg = scenario.features
    types = list(scenario.event_types[: fg.num_event_types or len(scenario.event_types)])
    rng = np.random.default_rng([scenario.seed, 0xFEA7])
    probs = _zipf_probs(len(types))
    kinds = [k for k, _ in _FUNC_WEIGHTS]
    kind_p = np.array([w for _, w in _FUNC_WEIGHTS])
    kind_p /= kind_p.sum()

    drafts = []
    for i in range(fg.num_features):
        primary = i if i < len(types) else int(rng.choice(len(types), p=probs))
        chosen = [primary]
        multi = rng.random() < fg.multi_event_fraction
        other = int(rng.choice(len(types), p=probs))
        if multi and len(types) > 1:
            if other == primary:
                other = (primary + 1) % len(types)
            chosen.append(other)
        kind = kinds[int(rng.choice(len(kinds), p=kind_p))]
        mismatch = rng.random() < fg.mismatch_fraction
        et = types[primary]
        pick = rng.random()
        limit_choice = [None, 3, 5, 10, 20][int(rng.integers(0, 5))]
        two_attrs = rng.random() < 0.3
        fresh = int(rng.choice(fg.ranges_s))
        u = rng.random()
        if len(chosen) > 1:
            numeric, text = ["dur"], ["item"]
        else:
            numeric, text = et.numeric_names, et.text_names + et.list_names
        if kind in (CompKind.SUM, CompKind.AVG, CompKind.MIN, CompKind.MAX):
            attrs = [text[0] if mismatch else numeric[int(pick * len(numeric))]]
        elif kind is CompKind.DISTINCT_COUNT:
            attrs = [text[int(pick * len(text))]]
        elif kind is CompKind.CONCAT:
            attrs = [text[0], numeric[0]] if two_attrs else [(numeric + text)[int(pick * (len(numeric) + len(text)))]]
        else:
            attrs = [(numeric + text)[int(pick * (len(numeric) + len(text)))]]
        func = CompFunc(kind, limit_choice if kind is CompKind.CONCAT else None)
        drafts.append((f"f{i:03d}", tuple(types[c].name for c in chosen), fresh, u, tuple(attrs), func))

    anchor: dict[str, int] = {}
    for _, events, fresh, _, _, _ in drafts:
        for e in events:
            anchor[e] = max(anchor.get(e, 0), fresh)
    features = []
    for fid, events, fresh, u, attrs, func in drafts:
        pooled = min(anchor[e] for e in events)
        rng_s = pooled if u < fg.redundancy else fresh
        features.append(FeatureSpec(fid, events, rng_s, attrs, func))
    spec = ModelSpec(
        model_id=model_id or scenario.name,
        features=tuple(features),
        cache_budget_bytes=scenario.cache_budget_bytes,
        inference_stub_ms=scenario.inference_stub_ms,
    )
    spec.validate()
    return normalize(spec)


def request_times(scenario: WorkloadScenario) -> list[int]:
    """Request timestamps (ms) of the scenario's schedule."""
    sch = scenario.schedule
    start = sch.start_s
    if start is None:
        start = max(scenario.features.ranges_s)
    start_ms = int(start * 1000)
    if sch.kind == "fixed":
        return [start_ms + int(round(i * sch.interval_s * 1000)) for i in range(sch.count)]
    if sch.kind == "burst":
        out, t = [], start_ms
        while len(out) < sch.count:
            for j in range(sch.burst_size):
                if len(out) == sch.count:
                    break
                out.append(t + int(round(j * sch.burst_gap_s * 1000)))
            t += int(round(sch.interval_s * 1000))
        return out
    raise ValueError(f"unknown schedule kind {sch.kind!r}")
