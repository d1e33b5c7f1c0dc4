"""Online feature extraction over naive or optimized FE-graphs.

A request at time ``t`` runs four steps:

1. take cached attribute rows per event type and compute the residual
   window after the cached log position;
2. RETRIEVE and DECODE only the residual rows;
3. merge cached and fresh rows by (timestamp, event_id), route them through
   each type's hierarchical filter and COMPUTE every feature;
4. re-plan and update the cache under the current budget.

Values never depend on cache state; only the counters in ``OpStats`` do.
"""

from __future__ import annotations

import enum
import heapq
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .cache import (
    CachedRow,
    CacheState,
    EventTypeProfile,
    abstract_cost_ns,
    evict_to_budget,
    plan_cache_greedy,
    profile_event_types,
    update_after_execution,
)
from .event_log import MAX_EVENT_ID, BehaviorEvent, EventLog, LogSnapshot, MalformedPayload, TimeWindow, decode_payload
from .feature_spec import CompFunc, CompKind, ModelSpec, normalize
from .graph import FEGraph, HierarchicalFilterPlan, OpKind, OptimizedGraph, build_naive_graph, group_by_event
from .optimizer import optimize

__all__ = [
    "Mode",
    "OpStats",
    "FeatureError",
    "ExtractionResult",
    "TypeMismatch",
    "UnsortedInput",
    "decode",
    "compute",
    "hierarchical_filter",
    "execute",
    "Engine",
]

Row = tuple  # (timestamp_ms, event_id, attrs)


class TypeMismatch(TypeError):
    pass


class UnsortedInput(ValueError):
    pass


class Mode(str, enum.Enum):
    NAIVE = "naive"
    FUSED = "fused"
    CACHE_ONLY = "cache_only"
    FULL = "full"

    @property
    def fusion(self) -> bool:
        return self in (Mode.FUSED, Mode.FULL)

    @property
    def caching(self) -> bool:
        return self in (Mode.CACHE_ONLY, Mode.FULL)

    @classmethod
    def parse(cls, text: str) -> "Mode":
        text = text.strip().lower().replace("-", "_")
        if text == "cache":
            return cls.CACHE_ONLY
        return cls(text)


@dataclass
class OpStats:
    rows_retrieved: int = 0
    decode_calls: int = 0
    malformed_rows: int = 0
    filter_threshold_comparisons: int = 0
    filter_extractions: int = 0
    compute_calls: int = 0
    compute_values: int = 0
    cache_hit_rows: int = 0
    cache_miss_rows: int = 0
    retrieve_decode_units: int = 0
    retrieve_ns: int = 0
    decode_ns: int = 0
    filter_ns: int = 0
    compute_ns: int = 0
    cache_ns: int = 0

    @property
    def rows_processed(self) -> int:
        return self.decode_calls + self.cache_hit_rows

    @property
    def cost_units(self) -> int:
        """Abstract operation cost: retrieve+decode per row dominates, filter
        comparisons, extractions, compute inputs and cache reads cost 1 each."""
        return (
            self.retrieve_decode_units
            + self.filter_threshold_comparisons
            + self.filter_extractions
            + self.compute_values
            + self.cache_hit_rows
        )

    @property
    def extraction_ns(self) -> int:
        return self.retrieve_ns + self.decode_ns + self.filter_ns + self.compute_ns + self.cache_ns

    def add(self, other: "OpStats") -> None:
        for k, v in asdict(other).items():
            setattr(self, k, getattr(self, k) + v)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cost_units"] = self.cost_units
        d["extraction_ns"] = self.extraction_ns
        return d


@dataclass(frozen=True)
class FeatureError:
    kind: str
    message: str


@dataclass
class ExtractionResult:
    model_id: str
    request_time_ms: int
    values: dict[str, Any]
    stats: OpStats = field(default_factory=OpStats)
    wall_ns: int = 0

    def to_record(self) -> dict:
        return {
            "model_id": self.model_id,
            "request_time_ms": self.request_time_ms,
            "values": {k: _jsonable(v) for k, v in sorted(self.values.items())},
            "stats": self.stats.to_dict(),
            "wall_ns": self.wall_ns,
        }


def _jsonable(value: Any) -> Any:
    if isinstance(value, FeatureError):
        return {"error": value.kind, "message": value.message}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


# -- operators -----------------------------------------------------------


def decode(payload: bytes, stats: OpStats | None = None) -> dict:
    """Decode a payload into its attribute map, counting the call."""
    if stats is not None:
        stats.decode_calls += 1
    return decode_payload(payload)


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _hashable(v: Any) -> Any:
    if isinstance(v, list):
        return tuple(_hashable(x) for x in v)
    if isinstance(v, tuple):
        return tuple(_hashable(x) for x in v)
    return v


def _plain(v: Any) -> Any:
    return list(v) if isinstance(v, tuple) else v


def compute(func: CompFunc, values: Sequence[Any]) -> Any:
    """Aggregate chronologically ordered attribute values.

    Empty input gives 0 for count/sum/distinct_count, [] for concat and
    None (missing) for avg/min/max.
    """
    kind = func.kind
    if kind is CompKind.COUNT:
        return float(len(values))
    if kind is CompKind.DISTINCT_COUNT:
        return float(len({_hashable(v) for v in values}))
    if kind is CompKind.CONCAT:
        tail = values if func.concat_limit is None else values[-func.concat_limit :]
        return [_plain(v) for v in tail]
    for v in values:
        if not _is_number(v):
            raise TypeMismatch(f"{kind.value} over non-numeric value {v!r}")
    if kind is CompKind.SUM:
        return math.fsum(values)
    if not values:
        return None
    if kind is CompKind.AVG:
        return math.fsum(values) / len(values)
    if kind is CompKind.MIN:
        return float(min(values))
    return float(max(values))


def _extract(attrs: Mapping, names: tuple[str, ...]) -> tuple[bool, Any]:
    if len(names) == 1:
        name = names[0]
        if name in attrs:
            return True, attrs[name]
        return False, None
    if all(n in attrs for n in names):
        return True, tuple(attrs[n] for n in names)
    return False, None


def hierarchical_filter(
    plan: HierarchicalFilterPlan,
    decoded: Iterable[Row],
    request_time_ms: int,
    stats: OpStats | None = None,
    *,
    keyed: bool = False,
) -> dict[str, list]:
    """Route a chronological row stream to every feature in ``plan``.

    ``decoded`` yields ``(timestamp_ms, event_id, attrs)`` ascending by time.
    Ages only shrink along the stream, so the bucket pointer only moves
    forward: at most one failed threshold comparison per row plus one
    successful comparison per range. A row of age ``a`` goes to the
    cumulative bucket of the smallest range strictly greater than ``a``
    (windows are start-exclusive).

    With ``keyed=True`` each output entry is ``((timestamp_ms, event_id), value)``.
    """
    thresholds = [r * 1000 for r in plan.ranges_desc]
    buckets = [[(t.feature_id, t.attr_names) for t in entry] for entry in plan.cumulative_targets]
    out: dict[str, list] = {t.feature_id: [] for t in plan.targets}
    m = len(thresholds)
    k = -1
    comparisons = extractions = 0
    prev_ts = None
    for ts, event_id, attrs in decoded:
        if prev_ts is not None and ts < prev_ts:
            raise UnsortedInput(f"timestamp {ts} after {prev_ts}")
        prev_ts = ts
        age = request_time_ms - ts
        if age < 0:
            raise UnsortedInput(f"row at {ts} is after request time {request_time_ms}")
        while k + 1 < m:
            comparisons += 1
            if thresholds[k + 1] > age:
                k += 1
            else:
                break
        if k < 0:
            continue
        for fid, names in buckets[k]:
            extractions += 1
            ok, value = _extract(attrs, names)
            if ok:
                out[fid].append(((ts, event_id), value) if keyed else value)
    if stats is not None:
        stats.filter_threshold_comparisons += comparisons
        stats.filter_extractions += extractions
    return out


# -- execution -----------------------------------------------------------


class _Request:
    """Per-request state shared by the naive and fused paths."""

    def __init__(self, snap: LogSnapshot, cache: CacheState | None, t: int, stats: OpStats):
        self.snap = snap
        self.cache = cache
        self.t = t
        self.stats = stats
        # event -> event_id -> (ts, attrs) decoded this request (only when caching)
        self.fresh: dict[str, dict[int, tuple[int, dict]]] = {}

    def cached_rows(self, event: str, start_ms: int) -> list[CachedRow] | None:
        cache = self.cache
        if cache is None or cache.position is None or event not in cache.rows:
            return None
        rows = cache.rows[event]
        lo = 0
        # rows ascend by timestamp; skip expired prefix
        while lo < len(rows) and rows[lo].timestamp_ms <= start_ms:
            lo += 1
        return rows[lo:]

    def fetch(self, event: str, start_ms: int) -> list[Row]:
        """Rows of ``event`` in ``(start_ms, t]``: cached ones plus decoded residual."""
        stats = self.stats
        t0 = time.perf_counter_ns()
        cached = self.cached_rows(event, start_ms)
        if cached is None:
            events = self.snap.query(event, TimeWindow(start_ms, self.t)) if start_ms < self.t else []
        else:
            after = max(self.cache.position, (start_ms, MAX_EVENT_ID))
            events = self.snap.query_since(event, after[0], after[1], self.t)
        t1 = time.perf_counter_ns()
        stats.retrieve_ns += t1 - t0
        stats.rows_retrieved += len(events)
        stats.cache_miss_rows += len(events)
        decoded = self._decode(event, events)
        stats.decode_ns += time.perf_counter_ns() - t1
        if not cached:
            return decoded
        stats.cache_hit_rows += len(cached)
        return [(r.timestamp_ms, r.event_id, r.attrs) for r in cached] + decoded

    def _decode(self, event: str, events: list[BehaviorEvent]) -> list[Row]:
        stats = self.stats
        out = []
        keep = self.fresh.setdefault(event, {}) if self.cache is not None else None
        for e in events:
            stats.decode_calls += 1
            stats.retrieve_decode_units += abstract_cost_ns(len(e.payload))
            try:
                attrs = decode_payload(e.payload)
            except MalformedPayload:
                stats.malformed_rows += 1
                continue
            out.append((e.timestamp_ms, e.event_id, attrs))
            if keep is not None:
                keep[e.event_id] = (e.timestamp_ms, attrs)
        return out


def _merge(streams: list[list]) -> list:
    if len(streams) == 1:
        return streams[0]
    return list(heapq.merge(*streams, key=lambda item: item[0]))


def _compute_feature(func: CompFunc, values: list, stats: OpStats) -> Any:
    stats.compute_calls += 1
    stats.compute_values += len(values)
    try:
        return compute(func, values)
    except TypeMismatch as exc:
        return FeatureError("type_mismatch", str(exc))


def _run_fused(graph: OptimizedGraph, req: _Request, values: dict) -> None:
    stats, t = req.stats, req.t
    routed: dict[str, list[list]] = {}
    for event, plan in sorted(graph.plans.items()):
        rows = req.fetch(event, t - plan.max_range_s * 1000)
        t0 = time.perf_counter_ns()
        out = hierarchical_filter(plan, rows, t, stats, keyed=True)
        stats.filter_ns += time.perf_counter_ns() - t0
        for fid, items in out.items():
            routed.setdefault(fid, []).append(items)
    t0 = time.perf_counter_ns()
    for node in sorted(graph.of_kind(OpKind.COMPUTE), key=lambda n: n.feature_id):
        items = _merge(routed.get(node.feature_id, [[]]))
        values[node.feature_id] = _compute_feature(node.comp_func, [v for _, v in items], stats)
    stats.compute_ns += time.perf_counter_ns() - t0


def _run_naive(graph: FEGraph, req: _Request, values: dict) -> None:
    stats, t = req.stats, req.t
    radj = graph.reverse_adjacency()
    for node in sorted(graph.of_kind(OpKind.COMPUTE), key=lambda n: n.feature_id):
        filters = [graph.nodes[p] for p in radj[node.node_id]]
        streams = []
        for filt in filters:
            start = t - filt.time_range_s * 1000
            names = filt.attr_names
            for event in filt.event_names:
                rows = req.fetch(event, start)
                t0 = time.perf_counter_ns()
                items = []
                for ts, event_id, attrs in rows:
                    stats.filter_threshold_comparisons += 1
                    if t - ts >= filt.time_range_s * 1000:
                        continue
                    stats.filter_extractions += 1
                    ok, value = _extract(attrs, names)
                    if ok:
                        items.append(((ts, event_id), value))
                streams.append(items)
                stats.filter_ns += time.perf_counter_ns() - t0
        t0 = time.perf_counter_ns()
        items = _merge(streams) if streams else []
        values[node.feature_id] = _compute_feature(node.comp_func, [v for _, v in items], stats)
        stats.compute_ns += time.perf_counter_ns() - t0


def _update_cache(
    spec: ModelSpec,
    profiles: Sequence[EventTypeProfile],
    req: _Request,
) -> None:
    cache, t = req.cache, req.t
    assert cache is not None
    t0 = time.perf_counter_ns()
    cache.observe_request(t)
    union = {e: sorted({a for f in fs for a in f.attr_names}) for e, fs in group_by_event(spec.features).items()}
    rated = []
    for p in profiles:
        start = t - p.max_time_range_s * 1000
        fresh = req.fresh.get(p.event_name, {})
        n = sum(1 for ts, _ in fresh.values() if ts > start)
        cached = req.cached_rows(p.event_name, start)
        if cached:
            n += len(cached)
        rated.append(p.with_rate(n / p.max_time_range_s))
    plan = plan_cache_greedy(rated, cache.interval_ms(), cache.budget_bytes)
    fresh_rows = {}
    for event in plan.keep:
        needed = union[event]
        fresh_rows[event] = [
            CachedRow.of(eid, ts, {a: attrs[a] for a in needed if a in attrs})
            for eid, (ts, attrs) in sorted(req.fresh.get(event, {}).items(), key=lambda kv: (kv[1][0], kv[0]))
        ]
    update_after_execution(cache, plan, fresh_rows, t, position=req.snap.position_after(t))
    req.stats.cache_ns += time.perf_counter_ns() - t0


def execute(
    spec: ModelSpec,
    graph: FEGraph,
    log: EventLog | LogSnapshot,
    cache: CacheState | None,
    request_time_ms: int,
    *,
    profiles: Sequence[EventTypeProfile] | None = None,
) -> ExtractionResult:
    """Extract every feature of ``spec`` at ``request_time_ms``.

    An ``OptimizedGraph`` runs the fused path, any other FE-graph runs one
    chain per feature. ``cache=None`` disables caching; otherwise the cache
    is consulted and then updated in place.
    """
    started = time.perf_counter_ns()
    snap = log.snapshot() if isinstance(log, EventLog) else log
    stats = OpStats()
    if cache is not None and cache.last_request_ms is not None and request_time_ms < cache.last_request_ms:
        # cached rows may lie after this request; start over
        cache.clear()
        cache.last_request_ms = None
    req = _Request(snap, cache, request_time_ms, stats)
    values: dict[str, Any] = {}
    if isinstance(graph, OptimizedGraph):
        _run_fused(graph, req, values)
    else:
        _run_naive(graph, req, values)
    if cache is not None:
        if profiles is None:
            profiles = profile_event_types(spec, [])
        _update_cache(spec, profiles, req)
    return ExtractionResult(spec.model_id, request_time_ms, values, stats, time.perf_counter_ns() - started)


class Engine:
    """One deployed model: optimized once at construction, then serves requests.

    Requests must be serialized; the instance itself may move between threads.
    """

    def __init__(
        self,
        spec: ModelSpec,
        log: EventLog,
        mode: Mode | str = Mode.FULL,
        *,
        budget_bytes: int | None = None,
        cost_mode: str | None = None,
        profiles: Sequence[EventTypeProfile] | None = None,
    ):
        self.spec = normalize(spec)
        self.log = log
        self.mode = Mode.parse(mode) if isinstance(mode, str) else mode
        self.naive_graph = build_naive_graph(self.spec)
        self.graph: FEGraph = optimize(self.spec) if self.mode.fusion else self.naive_graph
        self.profiles = list(profiles) if profiles is not None else profile_event_types(self.spec, log, mode=cost_mode)
        self.cache: CacheState | None = None
        if self.mode.caching:
            budget = self.spec.cache_budget_bytes if budget_bytes is None else budget_bytes
            self.cache = CacheState(budget, {p.event_name: p.max_time_range_s for p in self.profiles})

    def extract(self, request_time_ms: int) -> ExtractionResult:
        return execute(self.spec, self.graph, self.log, self.cache, request_time_ms, profiles=self.profiles)

    def set_budget(self, budget_bytes: int) -> None:
        if self.cache is not None:
            evict_to_budget(self.cache, budget_bytes)
