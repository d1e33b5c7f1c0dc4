from __future__ import annotations

import random
from dataclasses import replace

from fexgraph.feature_spec import CompFunc, CompKind, FeatureSpec, ModelSpec, normalize
from fexgraph.graph import OpKind, build_naive_graph, validate_graph
from fexgraph.optimizer import (
    build_filter_plan,
    dump_graph,
    fuse_chains,
    load_graph,
    optimize,
    partition_chains,
)
from fexgraph.workload import bundled_model
from helpers import random_spec


def _f(fid, events, range_s, attr="x"):
    return FeatureSpec(fid, tuple(events), range_s, (attr,), CompFunc(CompKind.COUNT))


def _spec(*features):
    return normalize(ModelSpec("m", features))


def test_partition_two_events():
    g = partition_chains(build_naive_graph(_spec(_f("A", ["a", "b"], 60))))
    retrieves = g.of_kind(OpKind.RETRIEVE)
    assert sorted(r.event_names for r in retrieves) == [("a",), ("b",)]
    assert all(r.time_range_s == 60 for r in retrieves)
    (compute,) = g.of_kind(OpKind.COMPUTE)
    assert len(g.predecessors(compute.node_id)) == 2


def test_partition_single_event_is_isomorphic():
    naive = build_naive_graph(_spec(_f("A", ["a"], 60)))
    part = partition_chains(naive)
    assert len(part.nodes) == len(naive.nodes)
    assert len(part.edges) == len(naive.edges)
    assert [part.nodes[n].kind for n in part.topological_order()] == [naive.nodes[n].kind for n in naive.topological_order()]


def test_partition_leaves_single_event_retrieves():
    rng = random.Random(3)
    for _ in range(200):
        g = partition_chains(build_naive_graph(random_spec(rng)))
        assert all(len(r.event_names) == 1 for r in g.of_kind(OpKind.RETRIEVE))
        validate_graph(g)


def test_fusion_takes_max_range():
    g = optimize(_spec(_f("A", ["e1"], 3600), _f("B", ["e1"], 86400)))
    (r,) = g.of_kind(OpKind.RETRIEVE)
    assert r.event_names == ("e1",) and r.time_range_s == 86400


def test_disjoint_types_do_not_fuse():
    g = optimize(_spec(_f("A", ["e1"], 60), _f("B", ["e2"], 60), _f("C", ["e3"], 60)))
    assert len(g.of_kind(OpKind.RETRIEVE)) == 3


def test_retrieve_count_equals_distinct_events():
    rng = random.Random(4)
    for _ in range(200):
        spec = random_spec(rng)
        g = optimize(spec)
        validate_graph(g)
        assert len(g.of_kind(OpKind.RETRIEVE)) == len(spec.event_names)
        assert len(g.of_kind(OpKind.DECODE)) == len(spec.event_names)
        assert len(g.of_kind(OpKind.COMPUTE)) == len(spec.features)
        inputs = g.compute_inputs()
        for f in spec.features:
            assert inputs[f.feature_id] == sorted(f.event_names)
        for event, plan in g.plans.items():
            widest = max(f.time_range_s for f in spec.features if event in f.event_names)
            assert plan.max_range_s == widest


def test_filter_plan_example():
    plan = build_filter_plan("e", [("a", 300, ["x"]), ("b", 3600, ["x"]), ("c", 3600, ["y"]), ("d", 86400, ["z"])])
    assert plan.ranges_desc == (86400, 3600, 300)
    assert [t.feature_id for t in plan.cumulative_targets[0]] == ["d"]
    assert sorted(t.feature_id for t in plan.cumulative_targets[2]) == ["a", "b", "c", "d"]
    assert plan.union_attrs == frozenset({"x", "y", "z"})


def test_filter_plan_single_feature():
    plan = build_filter_plan("e", [("a", 60, ["x"])])
    assert plan.ranges_desc == (60,)
    assert [[t.feature_id for t in entry] for entry in plan.cumulative_targets] == [["a"]]


def test_filter_plan_membership_oracle():
    rng = random.Random(5)
    for _ in range(500):
        feats = [(f"f{i}", rng.choice([10, 60, 300, 900, 3600, 86400]), [rng.choice("xyz")]) for i in range(rng.randint(1, 12))]
        plan = build_filter_plan("e", feats)
        assert list(plan.ranges_desc) == sorted({r for _, r, _ in feats}, reverse=True)
        for k, r in enumerate(plan.ranges_desc):
            want = {fid for fid, fr, _ in feats if fr >= r}
            assert {t.feature_id for t in plan.cumulative_targets[k]} == want


def test_dump_load_dump_fixed_point():
    rng = random.Random(6)
    for _ in range(30):
        spec = random_spec(rng)
        for g in (build_naive_graph(spec), optimize(spec)):
            text = dump_graph(g)
            assert dump_graph(load_graph(text)) == text
            assert load_graph(text) == g


def test_dot_output():
    dot = dump_graph(optimize(_spec(_f("A", ["e1"], 60))), "dot")
    assert dot.startswith("digraph")
    assert '"source" -> "e[e1]/retrieve"' in dot


def test_vr_like_collapses_to_24_groups():
    spec = bundled_model("vr_like")
    naive = build_naive_graph(spec)
    opt = optimize(spec)
    assert len(naive.of_kind(OpKind.RETRIEVE)) == 134
    assert len(opt.of_kind(OpKind.RETRIEVE)) == 24
    assert len(opt.plans) == 24


def test_permuted_specs_dump_identically():
    rng = random.Random(8)
    for _ in range(30):
        spec = random_spec(rng)
        feats = list(spec.features)
        rng.shuffle(feats)
        permuted = ModelSpec("rand", tuple(replace(f, event_names=tuple(reversed(f.event_names))) for f in feats))
        assert dump_graph(optimize(normalize(permuted))) == dump_graph(optimize(spec))
        assert dump_graph(build_naive_graph(normalize(permuted)), "dot") == dump_graph(build_naive_graph(spec), "dot")


def test_fuse_requires_partitioned_input_is_equivalent_to_optimize():
    rng = random.Random(9)
    spec = random_spec(rng)
    assert fuse_chains(partition_chains(build_naive_graph(spec))) == optimize(spec)
