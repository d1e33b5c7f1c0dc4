"""Offline FE-graph optimization: chain partition, chain fusion, filter plans.

``optimize(spec)`` runs the whole pipeline::

    naive = build_naive_graph(spec)
    fused = fuse_chains(partition_chains(naive))

The fused graph has one RETRIEVE/DECODE/FILTER chain per event type. Output
separation for the fused features happens inside the FILTER via a
``HierarchicalFilterPlan``, right before each feature's COMPUTE.
"""

from __future__ import annotations

import json
from collections import defaultdict
from typing import Any, Iterable

from .feature_spec import CompFunc, CompKind, ModelSpec
from .graph import (
    SOURCE_ID,
    FEGraph,
    FilterTarget,
    GraphInvariantError,
    HierarchicalFilterPlan,
    OpKind,
    OpNode,
    OptimizedGraph,
    build_naive_graph,
)

__all__ = [
    "build_filter_plan",
    "partition_chains",
    "fuse_chains",
    "optimize",
    "dump_graph",
    "load_graph",
    "to_dot",
]


def build_filter_plan(
    event_name: str, features: Iterable[tuple[str, int, tuple[str, ...] | list[str]]]
) -> HierarchicalFilterPlan:
    """Precompute the range -> cumulative targets mapping for one event type.

    ``features`` holds ``(feature_id, time_range_s, attr_names)`` triples.
    """
    features = sorted(((fid, rng, tuple(attrs)) for fid, rng, attrs in features), key=lambda t: t[0])
    if not features:
        raise ValueError(f"no features for event {event_name!r}")
    ranges_desc = tuple(sorted({rng for _, rng, _ in features}, reverse=True))
    cumulative = []
    for threshold in ranges_desc:
        cumulative.append(
            tuple(FilterTarget(fid, attrs) for fid, rng, attrs in features if rng >= threshold)
        )
    union = frozenset(a for _, _, attrs in features for a in attrs)
    return HierarchicalFilterPlan(event_name, ranges_desc, tuple(cumulative), union)


def partition_chains(graph: FEGraph) -> FEGraph:
    """Split each feature chain into one sub-chain per event type.

    Sub-RETRIEVEs keep the feature's time range. The feature's COMPUTE
    consumes all of its sub-chains, merged by (timestamp, event_id).
    """
    out = FEGraph()
    out.add(OpNode(SOURCE_ID, OpKind.SOURCE))
    radj = graph.reverse_adjacency()
    for compute in sorted(graph.of_kind(OpKind.COMPUTE), key=lambda n: n.node_id):
        fid = compute.feature_id
        filters = [graph.nodes[p] for p in radj[compute.node_id]]
        sinks = [graph.nodes[s] for s in graph.successors(compute.node_id)]
        out.add(compute)
        for sink in sinks:
            out.add(sink)
            out.connect(compute.node_id, sink.node_id)
        seen: set[str] = set()
        for filt in filters:
            if filt.kind is not OpKind.FILTER:
                raise GraphInvariantError(f"{compute.node_id!r} is not fed by a FILTER")
            for event in filt.event_names:
                if event in seen:
                    continue
                seen.add(event)
                prefix = f"f[{fid}][{event}]"
                r = out.add(OpNode(f"{prefix}/retrieve", OpKind.RETRIEVE, event_names=(event,), time_range_s=filt.time_range_s))
                d = out.add(OpNode(f"{prefix}/decode", OpKind.DECODE, event_names=(event,)))
                f = out.add(
                    OpNode(
                        f"{prefix}/filter",
                        OpKind.FILTER,
                        event_names=(event,),
                        time_range_s=filt.time_range_s,
                        attr_names=filt.attr_names,
                        feature_id=fid,
                    )
                )
                out.connect(SOURCE_ID, r.node_id)
                out.chain(r, d, f, compute)
    return out


def fuse_chains(graph: FEGraph) -> OptimizedGraph:
    """Fuse sub-chains with identical event type into one chain per type.

    The fused RETRIEVE covers the widest member range; the FILTER carries
    the hierarchical plan that routes rows back to each member feature.
    """
    members: dict[str, list[OpNode]] = defaultdict(list)
    for filt in graph.of_kind(OpKind.FILTER):
        if len(filt.event_names) != 1:
            raise GraphInvariantError(f"{filt.node_id!r} is not partitioned")
        members[filt.event_names[0]].append(filt)

    out = OptimizedGraph()
    out.add(OpNode(SOURCE_ID, OpKind.SOURCE))
    for event in sorted(members):
        group = members[event]
        plan = build_filter_plan(event, [(f.feature_id, f.time_range_s, f.attr_names) for f in group])
        prefix = f"e[{event}]"
        r = out.add(OpNode(f"{prefix}/retrieve", OpKind.RETRIEVE, event_names=(event,), time_range_s=plan.max_range_s))
        d = out.add(OpNode(f"{prefix}/decode", OpKind.DECODE, event_names=(event,)))
        f = out.add(
            OpNode(
                f"{prefix}/filter",
                OpKind.FILTER,
                event_names=(event,),
                time_range_s=plan.max_range_s,
                attr_names=tuple(sorted(plan.union_attrs)),
                plan=plan,
            )
        )
        out.connect(SOURCE_ID, r.node_id)
        out.chain(r, d, f)

    for compute in sorted(graph.of_kind(OpKind.COMPUTE), key=lambda n: n.node_id):
        out.add(compute)
        for event in sorted({graph.nodes[p].event_names[0] for p in graph.predecessors(compute.node_id)}):
            out.connect(f"e[{event}]/filter", compute.node_id)
        for s in graph.successors(compute.node_id):
            out.add(graph.nodes[s])
            out.connect(compute.node_id, s)
    return out


def optimize(spec: ModelSpec) -> OptimizedGraph:
    return fuse_chains(partition_chains(build_naive_graph(spec)))


# -- serialization -------------------------------------------------------


def _node_record(node: OpNode) -> dict[str, Any]:
    rec: dict[str, Any] = {"id": node.node_id, "kind": node.kind.value}
    if node.event_names:
        rec["events"] = list(node.event_names)
    if node.time_range_s is not None:
        rec["range_s"] = node.time_range_s
    if node.attr_names:
        rec["attrs"] = list(node.attr_names)
    if node.comp_func is not None:
        rec["func"] = node.comp_func.kind.value
        if node.comp_func.concat_limit is not None:
            rec["concat_limit"] = node.comp_func.concat_limit
    if node.feature_id is not None:
        rec["feature"] = node.feature_id
    if node.plan is not None:
        p = node.plan
        rec["plan"] = {
            "event": p.event_name,
            "ranges_desc": list(p.ranges_desc),
            "targets": [[[t.feature_id, list(t.attr_names)] for t in entry] for entry in p.cumulative_targets],
            "union_attrs": sorted(p.union_attrs),
        }
    return rec


def _node_from_record(rec: dict[str, Any]) -> OpNode:
    plan = None
    if "plan" in rec:
        p = rec["plan"]
        plan = HierarchicalFilterPlan(
            p["event"],
            tuple(p["ranges_desc"]),
            tuple(tuple(FilterTarget(fid, tuple(attrs)) for fid, attrs in entry) for entry in p["targets"]),
            frozenset(p["union_attrs"]),
        )
    func = None
    if "func" in rec:
        func = CompFunc(CompKind(rec["func"]), rec.get("concat_limit"))
    return OpNode(
        node_id=rec["id"],
        kind=OpKind(rec["kind"]),
        event_names=tuple(rec.get("events", ())),
        time_range_s=rec.get("range_s"),
        attr_names=tuple(rec.get("attrs", ())),
        comp_func=func,
        feature_id=rec.get("feature"),
        plan=plan,
    )


def _dump_json(graph: FEGraph) -> str:
    doc = {
        "graph": "optimized" if isinstance(graph, OptimizedGraph) else "fe",
        "nodes": [_node_record(graph.nodes[k]) for k in sorted(graph.nodes)],
        "edges": [list(e) for e in sorted(graph.edges)],
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _dot_label(node: OpNode) -> str:
    if node.kind is OpKind.SOURCE:
        return "app log"
    if node.kind is OpKind.FEATURE_SINK:
        return node.feature_id or ""
    parts = [node.kind.value.capitalize()]
    if node.kind is OpKind.RETRIEVE:
        parts.append(f"{{{','.join(node.event_names)}}} {node.time_range_s}s")
    elif node.kind is OpKind.FILTER:
        if node.plan is not None:
            parts.append(" > ".join(f"{r}s" for r in node.plan.ranges_desc))
            parts.append(f"{len(node.plan.targets)} features")
        else:
            parts.append(",".join(node.attr_names))
    elif node.kind is OpKind.COMPUTE and node.comp_func is not None:
        parts.append(str(node.comp_func))
    return "\\n".join(parts)


_DOT_SHAPES = {
    OpKind.SOURCE: "cylinder",
    OpKind.RETRIEVE: "box",
    OpKind.DECODE: "box",
    OpKind.FILTER: "diamond",
    OpKind.COMPUTE: "ellipse",
    OpKind.FEATURE_SINK: "plaintext",
}


def to_dot(graph: FEGraph, name: str = "fe_graph") -> str:
    lines = [f"digraph {_dot_quote(name)} {{", "  rankdir=LR;"]
    for key in sorted(graph.nodes):
        node = graph.nodes[key]
        lines.append(
            f"  {_dot_quote(key)} [label={_dot_quote(_dot_label(node))}, shape={_DOT_SHAPES[node.kind]}];"
        )
    for a, b in sorted(graph.edges):
        lines.append(f"  {_dot_quote(a)} -> {_dot_quote(b)};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def dump_graph(graph: FEGraph, fmt: str = "json") -> str:
    """Deterministic text form of a graph; ``fmt`` is ``json`` or ``dot``."""
    if fmt == "json":
        return _dump_json(graph)
    if fmt == "dot":
        return to_dot(graph)
    raise ValueError(f"unknown graph format {fmt!r}")


def load_graph(text: str) -> FEGraph:
    """Inverse of ``dump_graph(..., 'json')``."""
    doc = json.loads(text)
    graph: FEGraph = OptimizedGraph() if doc.get("graph") == "optimized" else FEGraph()
    for rec in doc["nodes"]:
        graph.add(_node_from_record(rec))
    for a, b in doc["edges"]:
        graph.connect(a, b)
    return graph
