"""Cross-request caching of decoded attributes under a memory budget.

Caching is per event type: a kept type stores the pruned attributes of every
in-window row. Which types to keep is a 0/1 knapsack:

    maximize  sum(keep_i * utility_i)  s.t.  sum(keep_i * cost_i) <= budget
    utility_i = rate_i * max(0, range_i - interval) * cost_per_row_i
    cost_i    = rate_i * range_i * bytes_per_row_i

so utility_i / cost_i = (overlap_i / range_i) * (cost_per_row_i / bytes_per_row_i),
an interval-dependent fraction times a static per-type density. The online
policy is ratio-greedy with a best-single-item fallback (>= 1/2 of optimum);
``dp_oracle`` is the exact reference for tests.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .event_log import BehaviorEvent, EventLog, MalformedPayload, TimeWindow, decode_payload, encode_payload
from .feature_spec import ModelSpec
from .graph import group_by_event

__all__ = [
    "ABSTRACT_BASE_NS",
    "ABSTRACT_PER_BYTE_NS",
    "RECORD_OVERHEAD_BYTES",
    "EventTypeProfile",
    "KnapsackItem",
    "CachePlan",
    "CachedRow",
    "CacheState",
    "InstanceTooLarge",
    "abstract_cost_ns",
    "cost_mode",
    "record_size",
    "profile_event_types",
    "utility",
    "cost_bytes",
    "ratio",
    "greedy_knapsack",
    "dp_knapsack",
    "plan_cache_greedy",
    "dp_oracle",
    "update_after_execution",
    "evict_to_budget",
]

ABSTRACT_BASE_NS = 200
ABSTRACT_PER_BYTE_NS = 3
RECORD_OVERHEAD_BYTES = 32
PROFILE_SAMPLE_ROWS = 100
EWMA_ALPHA = 0.3
DEFAULT_INTERVAL_MS = 60_000.0
DP_UNIT_BYTES = 64
DP_MAX_ITEMS = 64
DP_MAX_UNITS = 10**6


class InstanceTooLarge(ValueError):
    pass


def abstract_cost_ns(payload_len: int) -> int:
    """Deterministic retrieve+decode cost of one row, in nanosecond units."""
    return ABSTRACT_BASE_NS + ABSTRACT_PER_BYTE_NS * payload_len


def cost_mode() -> str:
    mode = os.environ.get("FEXGRAPH_COST_MODE", "abstract").strip().lower()
    if mode not in ("abstract", "wallclock"):
        raise ValueError(f"FEXGRAPH_COST_MODE must be 'abstract' or 'wallclock', got {mode!r}")
    return mode


def record_size(attrs: Mapping) -> int:
    """Accounted bytes of one cached record."""
    return len(encode_payload(dict(attrs))) + RECORD_OVERHEAD_BYTES


@dataclass(frozen=True)
class EventTypeProfile:
    event_name: str
    cost_opt_per_event_ns: float
    size_per_event_bytes: float
    max_time_range_s: int
    rate_per_s: float = 0.0

    @property
    def static_ratio(self) -> float:
        return self.cost_opt_per_event_ns / self.size_per_event_bytes

    def with_rate(self, rate_per_s: float) -> "EventTypeProfile":
        return replace(self, rate_per_s=rate_per_s)


def _sample_events(log_sample, name: str, k: int) -> list[BehaviorEvent]:
    if isinstance(log_sample, EventLog):
        out = []
        for e in log_sample.events(name):
            out.append(e)
            if len(out) == k:
                break
        return out
    return [e for e in log_sample if e.event_name == name][:k]


def profile_event_types(
    spec: ModelSpec,
    log_sample: EventLog | Iterable[BehaviorEvent],
    *,
    mode: str | None = None,
    sample_rows: int = PROFILE_SAMPLE_ROWS,
) -> list[EventTypeProfile]:
    """Static per-type cost and size profile from (up to) ``sample_rows`` rows.

    Types absent from the sample are profiled on a synthetic row holding each
    needed attribute as 0.
    """
    mode = mode or cost_mode()
    if not isinstance(log_sample, EventLog):
        log_sample = list(log_sample)
    profiles = []
    for name, features in sorted(group_by_event(spec.features).items()):
        needed = sorted({a for f in features for a in f.attr_names})
        sample = _sample_events(log_sample, name, sample_rows)
        payloads = [e.payload for e in sample] or [encode_payload({a: 0 for a in needed})]
        costs, sizes = [], []
        for payload in payloads:
            t0 = time.perf_counter_ns()
            try:
                attrs = decode_payload(payload)
            except MalformedPayload:
                continue
            elapsed = time.perf_counter_ns() - t0
            costs.append(abstract_cost_ns(len(payload)) if mode == "abstract" else max(elapsed, 1))
            sizes.append(record_size({a: attrs[a] for a in needed if a in attrs}))
        if not costs:
            payload = encode_payload({a: 0 for a in needed})
            costs = [abstract_cost_ns(len(payload))]
            sizes = [record_size({a: 0 for a in needed})]
        if mode == "wallclock" and sample and isinstance(log_sample, EventLog):
            # amortized index lookup per row
            t0 = time.perf_counter_ns()
            log_sample.query(name, TimeWindow(sample[0].timestamp_ms - 1, sample[-1].timestamp_ms))
            per_row = (time.perf_counter_ns() - t0) / len(sample)
            costs = [c + per_row for c in costs]
        profiles.append(
            EventTypeProfile(
                event_name=name,
                cost_opt_per_event_ns=sum(costs) / len(costs),
                size_per_event_bytes=sum(sizes) / len(sizes),
                max_time_range_s=max(f.time_range_s for f in features),
            )
        )
    return profiles


def _overlap_ms(profile: EventTypeProfile, interval_ms: float) -> float:
    return max(0.0, profile.max_time_range_s * 1000.0 - interval_ms)


def utility(profile: EventTypeProfile, interval_ms: float) -> float:
    """Expected retrieve+decode cost saved next request by caching this type."""
    if interval_ms <= 0:
        raise ValueError("interval_ms must be positive")
    return profile.rate_per_s * _overlap_ms(profile, interval_ms) / 1000.0 * profile.cost_opt_per_event_ns


def cost_bytes(profile: EventTypeProfile) -> float:
    return profile.rate_per_s * profile.max_time_range_s * profile.size_per_event_bytes


def ratio(profile: EventTypeProfile, interval_ms: float) -> float:
    """utility / cost via the rate-free decomposition."""
    return _overlap_ms(profile, interval_ms) / (profile.max_time_range_s * 1000.0) * profile.static_ratio


@dataclass(frozen=True)
class KnapsackItem:
    name: str
    utility: float
    cost: float
    density: float | None = None

    @property
    def ratio(self) -> float:
        if self.density is not None:
            return self.density
        if self.cost > 0:
            return self.utility / self.cost
        return math.inf if self.utility > 0 else 0.0


@dataclass(frozen=True)
class CachePlan:
    keep: frozenset[str]
    predicted_utility: float
    predicted_cost_bytes: float
    ratios: Mapping[str, float] = field(default_factory=dict)


def greedy_knapsack(items: Sequence[KnapsackItem], budget: float) -> tuple[list[KnapsackItem], float, float]:
    """Ratio-greedy fill, then keep the better of that bundle and the best single item."""
    fitting = [it for it in items if it.cost <= budget and it.utility > 0]
    order = sorted(fitting, key=lambda it: (-it.ratio, it.name))
    bundle, used, gained = [], 0.0, 0.0
    for it in order:
        if used + it.cost <= budget:
            bundle.append(it)
            used += it.cost
            gained += it.utility
    if fitting:
        best = min(fitting, key=lambda it: (-it.utility, it.cost, it.name))
        if best.utility > gained:
            return [best], best.utility, best.cost
    return bundle, gained, used


def dp_knapsack(
    items: Sequence[KnapsackItem], budget: float, unit: float = DP_UNIT_BYTES
) -> tuple[list[KnapsackItem], float]:
    """Exact 0/1 knapsack with costs rounded up to ``unit`` (budget rounded down)."""
    if len(items) > DP_MAX_ITEMS:
        raise InstanceTooLarge(f"{len(items)} items > {DP_MAX_ITEMS}")
    cap = int(math.floor(budget / unit + 1e-12))
    if cap > DP_MAX_UNITS:
        raise InstanceTooLarge(f"{cap} budget units > {DP_MAX_UNITS}")
    if cap < 0:
        return [], 0.0
    weights = [int(math.ceil(it.cost / unit - 1e-12)) for it in items]
    best = np.zeros(cap + 1)
    take = np.zeros((len(items), cap + 1), dtype=bool)
    for i, (it, w) in enumerate(zip(items, weights)):
        if w > cap or it.utility <= 0:
            continue
        cand = best[: cap + 1 - w] + it.utility
        better = cand > best[w:]
        take[i, w:] = better
        best[w:] = np.where(better, cand, best[w:])
    chosen, c = [], cap
    for i in range(len(items) - 1, -1, -1):
        if take[i, c]:
            chosen.append(items[i])
            c -= weights[i]
    chosen.reverse()
    return chosen, float(sum(it.utility for it in chosen))


def _items(profiles: Iterable[EventTypeProfile], interval_ms: float) -> list[KnapsackItem]:
    return [
        KnapsackItem(p.event_name, utility(p, interval_ms), cost_bytes(p), ratio(p, interval_ms))
        for p in profiles
    ]


def plan_cache_greedy(profiles: Iterable[EventTypeProfile], interval_ms: float, budget_bytes: float) -> CachePlan:
    items = _items(profiles, interval_ms)
    chosen, gained, used = greedy_knapsack(items, budget_bytes)
    return CachePlan(frozenset(it.name for it in chosen), gained, used, {it.name: it.ratio for it in items})


def dp_oracle(
    profiles: Iterable[EventTypeProfile], interval_ms: float, budget_bytes: float, *, unit_bytes: float = DP_UNIT_BYTES
) -> CachePlan:
    items = _items(profiles, interval_ms)
    chosen, gained = dp_knapsack(items, budget_bytes, unit_bytes)
    return CachePlan(
        frozenset(it.name for it in chosen),
        gained,
        float(sum(it.cost for it in chosen)),
        {it.name: it.ratio for it in items},
    )


# -- cache state ---------------------------------------------------------


@dataclass
class CachedRow:
    event_id: int
    timestamp_ms: int
    attrs: dict
    size_bytes: int

    @classmethod
    def of(cls, event_id: int, timestamp_ms: int, attrs: dict) -> "CachedRow":
        return cls(event_id, timestamp_ms, attrs, record_size(attrs))


@dataclass
class CacheState:
    budget_bytes: int
    max_range_s: dict[str, int] = field(default_factory=dict)
    rows: dict[str, list[CachedRow]] = field(default_factory=dict)
    position: tuple[int, int] | None = None
    accounted_bytes: int = 0
    interval_estimate_ms: float | None = None
    last_request_ms: int | None = None
    ratios: dict[str, float] = field(default_factory=dict)

    def cached_types(self) -> list[str]:
        return sorted(self.rows)

    def type_bytes(self, name: str) -> int:
        return sum(r.size_bytes for r in self.rows.get(name, ()))

    def interval_ms(self) -> float:
        if self.interval_estimate_ms is None:
            return DEFAULT_INTERVAL_MS
        return self.interval_estimate_ms

    def observe_request(self, request_time_ms: int) -> None:
        """Fold the gap since the previous request into the interval EWMA."""
        last = self.last_request_ms
        if last is not None and request_time_ms == last:
            return
        if last is not None and request_time_ms > last:
            gap = float(request_time_ms - last)
            if self.interval_estimate_ms is None:
                self.interval_estimate_ms = gap
            else:
                self.interval_estimate_ms = EWMA_ALPHA * gap + (1 - EWMA_ALPHA) * self.interval_estimate_ms
        self.last_request_ms = request_time_ms

    def drop(self, name: str) -> None:
        removed = self.rows.pop(name, None)
        if removed:
            self.accounted_bytes -= sum(r.size_bytes for r in removed)

    def clear(self) -> None:
        self.rows.clear()
        self.accounted_bytes = 0
        self.position = None

    def check(self) -> None:
        """Assert the accounting and ordering invariants."""
        total = 0
        for name, rows in self.rows.items():
            keys = [(r.timestamp_ms, r.event_id) for r in rows]
            assert keys == sorted(keys) and len(set(keys)) == len(keys), f"{name} rows out of order"
            total += sum(r.size_bytes for r in rows)
        assert total == self.accounted_bytes, (total, self.accounted_bytes)
        assert self.accounted_bytes <= self.budget_bytes, (self.accounted_bytes, self.budget_bytes)

    def summary_rows(self) -> list[dict]:
        names = sorted(set(self.max_range_s) | set(self.rows))
        return [
            {
                "type": n,
                "ratio": self.ratios.get(n),
                "kept": n in self.rows,
                "rows": len(self.rows.get(n, ())),
                "bytes": self.type_bytes(n),
            }
            for n in names
        ]


def update_after_execution(
    cache: CacheState,
    plan: CachePlan,
    fresh_rows: Mapping[str, Sequence[CachedRow]],
    request_time_ms: int,
    *,
    position: tuple[int, int] | None = None,
) -> CacheState:
    """Apply ``plan`` after a request: drop unplanned types, append fresh rows
    to kept ones, expire old rows, then evict down to budget if needed.

    For a type that was not cached before, ``fresh_rows`` must hold its whole
    in-window row set; for a cached type, only rows after the cached position.
    """
    cache.observe_request(request_time_ms)
    cache.ratios.update(plan.ratios)
    for name in list(cache.rows):
        if name not in plan.keep:
            cache.drop(name)
    for name in sorted(plan.keep):
        cutoff = request_time_ms - cache.max_range_s[name] * 1000
        old = cache.rows.get(name, [])
        merged = [r for r in old if r.timestamp_ms > cutoff]
        merged.extend(r for r in fresh_rows.get(name, ()) if r.timestamp_ms > cutoff)
        cache.accounted_bytes += sum(r.size_bytes for r in merged) - sum(r.size_bytes for r in old)
        cache.rows[name] = merged
    if position is not None:
        cache.position = position
    if cache.accounted_bytes > cache.budget_bytes:
        evict_to_budget(cache, cache.budget_bytes)
    return cache


def evict_to_budget(cache: CacheState, new_budget_bytes: int) -> CacheState:
    """Evict whole types, lowest utility/cost first, until usage fits."""
    cache.budget_bytes = new_budget_bytes
    if cache.accounted_bytes <= new_budget_bytes:
        return cache
    # reverse of the greedy admission order (ratio desc, name asc)
    order = sorted(cache.rows, key=lambda n: (-cache.ratios.get(n, 0.0), n), reverse=True)
    for name in order:
        if cache.accounted_bytes <= new_budget_bytes:
            break
        cache.drop(name)
    return cache
