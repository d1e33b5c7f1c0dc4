"""FE-graph: the operator DAG from the app log to feature sinks.

Every source-to-sink path visits SOURCE, RETRIEVE, DECODE, FILTER, COMPUTE,
FEATURE_SINK in that order. The naive graph gives each feature a private
four-operator chain; the optimizer rewrites it (see ``optimizer``).
"""

from __future__ import annotations

import enum
import itertools
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .feature_spec import CompFunc, FeatureSpec, ModelSpec

__all__ = [
    "OpKind",
    "OpNode",
    "FEGraph",
    "OptimizedGraph",
    "FilterTarget",
    "HierarchicalFilterPlan",
    "GraphInvariantError",
    "build_naive_graph",
    "validate_graph",
    "RedundancyLevel",
    "PairRedundancy",
    "RedundancyReport",
    "identify_redundancy",
]


class OpKind(str, enum.Enum):
    SOURCE = "source"
    RETRIEVE = "retrieve"
    DECODE = "decode"
    FILTER = "filter"
    COMPUTE = "compute"
    FEATURE_SINK = "sink"

    @property
    def stage(self) -> int:
        return _STAGES[self]


_STAGES = {kind: i for i, kind in enumerate(OpKind)}


class GraphInvariantError(ValueError):
    pass


@dataclass(frozen=True)
class FilterTarget:
    feature_id: str
    attr_names: tuple[str, ...]


@dataclass(frozen=True)
class HierarchicalFilterPlan:
    """Reverse mapping from time ranges to the features that still need a row.

    ``cumulative_targets[k]`` lists every feature whose range is at least
    ``ranges_desc[k]``, so entries grow with ``k``.
    """

    event_name: str
    ranges_desc: tuple[int, ...]
    cumulative_targets: tuple[tuple[FilterTarget, ...], ...]
    union_attrs: frozenset[str]

    @property
    def max_range_s(self) -> int:
        return self.ranges_desc[0]

    @property
    def targets(self) -> tuple[FilterTarget, ...]:
        return self.cumulative_targets[-1] if self.cumulative_targets else ()

    @property
    def feature_ids(self) -> list[str]:
        return [t.feature_id for t in self.targets]


@dataclass(frozen=True)
class OpNode:
    node_id: str
    kind: OpKind
    event_names: tuple[str, ...] = ()
    time_range_s: int | None = None
    attr_names: tuple[str, ...] = ()
    comp_func: CompFunc | None = None
    feature_id: str | None = None
    plan: HierarchicalFilterPlan | None = None


SOURCE_ID = "source"


@dataclass
class FEGraph:
    nodes: dict[str, OpNode] = field(default_factory=dict)
    edges: list[tuple[str, str]] = field(default_factory=list)

    def add(self, node: OpNode) -> OpNode:
        if node.node_id in self.nodes:
            raise GraphInvariantError(f"duplicate node id {node.node_id!r}")
        self.nodes[node.node_id] = node
        return node

    def connect(self, src: str, dst: str) -> None:
        self.edges.append((src, dst))

    def chain(self, *nodes: OpNode) -> None:
        for a, b in zip(nodes, nodes[1:]):
            self.connect(a.node_id, b.node_id)

    def of_kind(self, kind: OpKind) -> list[OpNode]:
        return [n for n in self.nodes.values() if n.kind is kind]

    def successors(self, node_id: str) -> list[str]:
        return [b for a, b in self.edges if a == node_id]

    def predecessors(self, node_id: str) -> list[str]:
        return [a for a, b in self.edges if b == node_id]

    def adjacency(self) -> dict[str, list[str]]:
        adj: dict[str, list[str]] = {n: [] for n in self.nodes}
        for a, b in self.edges:
            adj[a].append(b)
        return adj

    def reverse_adjacency(self) -> dict[str, list[str]]:
        radj: dict[str, list[str]] = {n: [] for n in self.nodes}
        for a, b in self.edges:
            radj[b].append(a)
        return radj

    def topological_order(self) -> list[str]:
        indeg = Counter(b for _, b in self.edges)
        adj = self.adjacency()
        ready = sorted(n for n in self.nodes if indeg[n] == 0)
        order: list[str] = []
        while ready:
            n = ready.pop()
            order.append(n)
            for m in adj[n]:
                indeg[m] -= 1
                if indeg[m] == 0:
                    ready.append(m)
        if len(order) != len(self.nodes):
            raise GraphInvariantError("graph has a cycle")
        return order

    def chain_of(self, sink_id: str) -> Iterator[OpNode]:
        """Walk back from a node through first predecessors to the source."""
        radj = self.reverse_adjacency()
        cur: str | None = sink_id
        while cur is not None:
            yield self.nodes[cur]
            preds = radj[cur]
            cur = preds[0] if preds else None

    def sinks(self) -> dict[str, OpNode]:
        return {n.feature_id: n for n in self.of_kind(OpKind.FEATURE_SINK)}

    def __eq__(self, other) -> bool:
        if not isinstance(other, FEGraph):
            return NotImplemented
        return self.nodes == other.nodes and sorted(self.edges) == sorted(other.edges)


class OptimizedGraph(FEGraph):
    """FE-graph after partition and fusion: one RETRIEVE/DECODE/FILTER per event type."""

    @property
    def plans(self) -> dict[str, HierarchicalFilterPlan]:
        return {n.plan.event_name: n.plan for n in self.of_kind(OpKind.FILTER) if n.plan is not None}

    def compute_inputs(self) -> dict[str, list[str]]:
        """feature_id -> event names routed into its COMPUTE node."""
        radj = self.reverse_adjacency()
        out: dict[str, list[str]] = {}
        for node in self.of_kind(OpKind.COMPUTE):
            events = []
            for pred in radj[node.node_id]:
                plan = self.nodes[pred].plan
                if plan is not None:
                    events.append(plan.event_name)
            out[node.feature_id] = sorted(events)
        return out


def _feature_chain(graph: FEGraph, feature: FeatureSpec) -> None:
    fid = feature.feature_id
    prefix = f"f[{fid}]"
    retrieve = graph.add(
        OpNode(f"{prefix}/retrieve", OpKind.RETRIEVE, event_names=feature.event_names, time_range_s=feature.time_range_s)
    )
    decode = graph.add(OpNode(f"{prefix}/decode", OpKind.DECODE, event_names=feature.event_names))
    filt = graph.add(
        OpNode(
            f"{prefix}/filter",
            OpKind.FILTER,
            event_names=feature.event_names,
            time_range_s=feature.time_range_s,
            attr_names=feature.attr_names,
            feature_id=fid,
        )
    )
    compute = graph.add(OpNode(f"{prefix}/compute", OpKind.COMPUTE, comp_func=feature.comp_func, feature_id=fid))
    sink = graph.add(OpNode(f"{prefix}/sink", OpKind.FEATURE_SINK, feature_id=fid))
    graph.connect(SOURCE_ID, retrieve.node_id)
    graph.chain(retrieve, decode, filt, compute, sink)


def build_naive_graph(spec: ModelSpec) -> FEGraph:
    """One private RETRIEVE -> DECODE -> FILTER -> COMPUTE chain per feature."""
    graph = FEGraph()
    graph.add(OpNode(SOURCE_ID, OpKind.SOURCE))
    for feature in spec.features:
        _feature_chain(graph, feature)
    return graph


def validate_graph(graph: FEGraph, *, naive: bool = False) -> None:
    """Raise GraphInvariantError if the structural invariants do not hold.

    Every edge must advance exactly one stage, which makes every
    source-to-sink path follow the operator order. With ``naive=True`` the
    per-feature chains must also be disjoint.
    """
    sources = graph.of_kind(OpKind.SOURCE)
    if len(sources) != 1:
        raise GraphInvariantError(f"expected one SOURCE, found {len(sources)}")
    for a, b in graph.edges:
        if a not in graph.nodes or b not in graph.nodes:
            raise GraphInvariantError(f"dangling edge {a!r} -> {b!r}")
        ka, kb = graph.nodes[a].kind, graph.nodes[b].kind
        if kb.stage != ka.stage + 1:
            raise GraphInvariantError(f"edge {a!r} ({ka.value}) -> {b!r} ({kb.value}) skips or reverses a stage")
    graph.topological_order()
    adj = graph.adjacency()
    seen = {sources[0].node_id}
    stack = [sources[0].node_id]
    while stack:
        for m in adj[stack.pop()]:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    for sink in graph.of_kind(OpKind.FEATURE_SINK):
        if sink.node_id not in seen:
            raise GraphInvariantError(f"sink {sink.node_id!r} unreachable from SOURCE")
    if naive:
        radj = graph.reverse_adjacency()
        for node in graph.nodes.values():
            if node.kind is OpKind.SOURCE:
                continue
            if len(radj[node.node_id]) != 1:
                raise GraphInvariantError(f"{node.node_id!r} shared between chains")
            if node.kind is not OpKind.FEATURE_SINK and len(adj[node.node_id]) != 1:
                raise GraphInvariantError(f"{node.node_id!r} branches")


# -- redundancy ----------------------------------------------------------


class RedundancyLevel(str, enum.Enum):
    NONE = "none"
    PARTIAL = "partial"
    FULL = "full"


@dataclass(frozen=True)
class PairRedundancy:
    level: RedundancyLevel
    shared_event_names: frozenset[str]
    overlap_range_s: int


@dataclass
class RedundancyReport:
    pairwise: dict[tuple[str, str], PairRedundancy]
    summary: dict[RedundancyLevel, float]
    features_per_event: dict[str, int]

    def between(self, a: str, b: str) -> PairRedundancy:
        return self.pairwise[(a, b) if a <= b else (b, a)]

    def rows(self) -> list[dict]:
        return [
            {
                "feature_i": a,
                "feature_j": b,
                "level": p.level.value,
                "shared_events": sorted(p.shared_event_names),
                "overlap_s": p.overlap_range_s,
            }
            for (a, b), p in sorted(self.pairwise.items())
        ]

    def table(self) -> str:
        lines = [f"{'level':<10}{'fraction':>10}"]
        for level in RedundancyLevel:
            lines.append(f"{level.value:<10}{self.summary.get(level, 0.0):>10.4f}")
        lines.append("")
        lines.append(f"{'event':<28}{'features':>9}")
        for name, count in sorted(self.features_per_event.items(), key=lambda kv: (-kv[1], kv[0])):
            lines.append(f"{name:<28}{count:>9}")
        return "\n".join(lines)


def classify_pair(a: FeatureSpec, b: FeatureSpec) -> PairRedundancy:
    shared = frozenset(a.event_names) & frozenset(b.event_names)
    if not shared:
        return PairRedundancy(RedundancyLevel.NONE, shared, 0)
    if set(a.event_names) == set(b.event_names) and a.time_range_s == b.time_range_s:
        level = RedundancyLevel.FULL
    else:
        level = RedundancyLevel.PARTIAL
    return PairRedundancy(level, shared, min(a.time_range_s, b.time_range_s))


def identify_redundancy(spec: ModelSpec) -> RedundancyReport:
    """Classify every feature pair by intersecting their (events, range) conditions."""
    pairwise: dict[tuple[str, str], PairRedundancy] = {}
    features = sorted(spec.features, key=lambda f: f.feature_id)
    for a, b in itertools.combinations(features, 2):
        pairwise[(a.feature_id, b.feature_id)] = classify_pair(a, b)
    counts = Counter(p.level for p in pairwise.values())
    total = len(pairwise)
    summary = {level: (counts[level] / total if total else 0.0) for level in RedundancyLevel}
    per_event: dict[str, int] = defaultdict(int)
    for f in features:
        for e in f.event_names:
            per_event[e] += 1
    return RedundancyReport(pairwise, summary, dict(per_event))


def group_by_event(features: Iterable[FeatureSpec]) -> dict[str, list[FeatureSpec]]:
    groups: dict[str, list[FeatureSpec]] = defaultdict(list)
    for f in features:
        for e in f.event_names:
            groups[e].append(f)
    return dict(groups)
