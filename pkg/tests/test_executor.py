from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fexgraph.bench import random_case, run_interleaved
from fexgraph.event_log import EventLog, encode_payload
from fexgraph.executor import (
    Engine,
    FeatureError,
    Mode,
    OpStats,
    TypeMismatch,
    UnsortedInput,
    compute,
    decode,
    hierarchical_filter,
)
from fexgraph.feature_spec import CompFunc, CompKind, FeatureSpec, ModelSpec, normalize
from fexgraph.optimizer import build_filter_plan
from helpers import overlapping_spec

BIG = 1 << 30


def _spec(*features, budget=BIG):
    return normalize(ModelSpec("m", tuple(features), budget))


def _f(fid, events, range_s, attrs=("x",), kind=CompKind.COUNT, limit=None):
    return FeatureSpec(fid, tuple(events), range_s, tuple(attrs), CompFunc(kind, limit))


# -- decode ----------------------------------------------------------------


def test_decode_counts_calls():
    stats = OpStats()
    assert decode(encode_payload({"duration": 12.5, "genre": "comedy"}), stats) == {"duration": 12.5, "genre": "comedy"}
    assert decode(encode_payload({}), stats) == {}
    assert stats.decode_calls == 2


@settings(max_examples=100)
@given(st.dictionaries(st.text(min_size=1, max_size=5), st.integers() | st.text(max_size=5) | st.floats(allow_nan=False, allow_infinity=False)))
def test_decode_round_trip(attrs):
    assert decode(encode_payload(attrs)) == attrs


# -- hierarchical filter -----------------------------------------------------


def _rows(t, ages_s, attrs=None):
    return [(t - a * 1000, i + 1, attrs or {"x": a}) for i, a in enumerate(ages_s)]


def test_filter_bucket_membership():
    plan = build_filter_plan("e", [("long", 3600, ["x"]), ("short", 300, ["x"])])
    t = 10_000_000
    out = hierarchical_filter(plan, _rows(t, [4000, 1000, 100]), t)
    assert out == {"long": [1000, 100], "short": [100]}


def test_filter_window_is_start_exclusive():
    plan = build_filter_plan("e", [("a", 300, ["x"])])
    t = 1_000_000
    out = hierarchical_filter(plan, [(t - 300_000, 1, {"x": 1}), (t - 299_999, 2, {"x": 2})], t)
    assert out == {"a": [2]}


def test_filter_comparison_bound():
    rng = random.Random(0)
    ranges = [60, 300, 900, 3600, 86400]
    plan = build_filter_plan("e", [(f"f{i}", r, ["x"]) for i, r in enumerate(ranges)])
    t = 100_000_000
    ages = sorted((rng.uniform(0, 86400) for _ in range(1000)), reverse=True)
    stats = OpStats()
    hierarchical_filter(plan, [(t - int(a * 1000), i, {"x": 1}) for i, a in enumerate(ages)], t, stats)
    assert stats.filter_threshold_comparisons <= 1005


def test_filter_matches_naive_scan_oracle():
    rng = random.Random(1)
    for _ in range(500):
        feats = [(f"f{i}", rng.choice([1, 5, 10, 30, 60]), [rng.choice("xyz")]) for i in range(rng.randint(1, 6))]
        plan = build_filter_plan("e", feats)
        t = 100_000
        n = rng.randint(0, 60)
        stamps = sorted(rng.randint(t - plan.max_range_s * 1000, t) for _ in range(n))
        rows = []
        for i, ts in enumerate(stamps):
            attrs = {k: rng.randint(0, 9) for k in "xyz" if rng.random() < 0.8}
            rows.append((ts, i + 1, attrs))
        want = {fid: [a[attr[0]] for ts, _, a in rows if t - ts < r * 1000 and attr[0] in a] for fid, r, attr in feats}
        assert hierarchical_filter(plan, rows, t) == want


def test_filter_rejects_unsorted():
    plan = build_filter_plan("e", [("a", 60, ["x"])])
    with pytest.raises(UnsortedInput):
        hierarchical_filter(plan, [(10, 1, {}), (5, 2, {})], 20)


# -- compute -----------------------------------------------------------------


@pytest.mark.parametrize(
    "kind, values, expected",
    [
        (CompKind.AVG, [2, 4, 6], 4.0),
        (CompKind.MIN, [], None),
        (CompKind.MAX, [], None),
        (CompKind.AVG, [], None),
        (CompKind.COUNT, [], 0),
        (CompKind.SUM, [], 0),
        (CompKind.DISTINCT_COUNT, ["a", "b", "a"], 2),
        (CompKind.DISTINCT_COUNT, [[1, 2], [1, 2], [2]], 2),
        (CompKind.MIN, [3, -1.5, 2], -1.5),
        (CompKind.MAX, [3, -1.5, 2], 3.0),
        (CompKind.SUM, [0.1] * 10, 1.0),
    ],
)
def test_compute_examples(kind, values, expected):
    assert compute(CompFunc(kind), values) == expected


def test_concat_last_n():
    assert compute(CompFunc(CompKind.CONCAT, 3), ["a", "b", "c", "d"]) == ["b", "c", "d"]
    assert compute(CompFunc(CompKind.CONCAT), ["a"]) == ["a"]
    assert compute(CompFunc(CompKind.CONCAT), []) == []


def test_numeric_func_over_text_raises():
    with pytest.raises(TypeMismatch):
        compute(CompFunc(CompKind.SUM), [1, "x"])
    with pytest.raises(TypeMismatch):
        compute(CompFunc(CompKind.MAX), [True])


# -- execute -----------------------------------------------------------------


def _log(events):
    log = EventLog(validate=False)
    for name, ts, payload in events:
        log.append(name, ts, payload)
    return log


def test_cold_then_warm_request():
    log = _log([("e", ts, {"x": ts}) for ts in (1000, 2000, 3000)])
    engine = Engine(_spec(_f("c", ["e"], 3600)), log, Mode.FULL)
    cold = engine.extract(5000)
    assert cold.values == {"c": 3}
    assert cold.stats.cache_hit_rows == 0
    warm = engine.extract(5000)
    assert warm.values == cold.values
    assert warm.stats.decode_calls == 0
    assert warm.stats.cache_hit_rows == 3


def test_counter_soundness():
    rng = random.Random(2)
    events = []
    ts = 0
    for _ in range(400):
        ts += rng.randint(0, 2000)
        events.append((rng.choice("ab"), ts, {"x": rng.random()}))
    log = _log(events)
    spec = _spec(_f("a1", ["a"], 60, kind=CompKind.SUM), _f("a2", ["a"], 300), _f("b1", ["b", "a"], 120, kind=CompKind.AVG))
    engine = Engine(spec, log, Mode.FULL)
    for t in range(300_000, ts, 20_000):
        r = engine.extract(t)
        s = r.stats
        widest = {"a": 300_000, "b": 120_000}
        logical = sum(1 for name, ets, _ in events if t - widest[name] < ets <= t)
        assert s.decode_calls + s.cache_hit_rows == s.rows_processed == logical
        assert s.rows_retrieved == s.decode_calls


@pytest.mark.parametrize("n", [2, 10, 50])
def test_decode_ratio(n):
    log = _log([("e", 1000 + i, {"x": i}) for i in range(1000)])
    spec = overlapping_spec(n, range_s=3600)
    t = 10_000
    naive = Engine(spec, log, Mode.NAIVE).extract(t)
    fused = Engine(spec, log, Mode.FUSED).extract(t)
    assert naive.stats.decode_calls == n * 1000
    assert fused.stats.decode_calls == 1000
    assert naive.values == fused.values


def test_single_feature_degenerate_counts():
    log = _log([("e", 1000 + i, {"x": i}) for i in range(200)])
    spec = overlapping_spec(1, range_s=60)
    naive = Engine(spec, log, Mode.NAIVE).extract(50_000)
    fused = Engine(spec, log, Mode.FUSED).extract(50_000)
    assert naive.values == fused.values
    assert naive.stats.decode_calls == fused.stats.decode_calls == 200


def test_multi_event_concat_is_chronological():
    log = _log([("a", 1, {"x": "a1"}), ("b", 2, {"x": "b1"}), ("a", 2, {"x": "a2"}), ("b", 3, {"x": "b2"})])
    spec = _spec(_f("c", ["a", "b"], 60, kind=CompKind.CONCAT))
    for mode in Mode:
        assert Engine(spec, log, mode).extract(10).values["c"] == ["a1", "b1", "a2", "b2"]


def test_malformed_rows_skipped_and_counted():
    log = _log([("e", 1, {"x": 1}), ("e", 2, b"{broken"), ("e", 3, {"x": 2})])
    spec = _spec(_f("s", ["e"], 60, kind=CompKind.SUM))
    for mode in Mode:
        r = Engine(spec, log, mode).extract(10)
        assert r.values["s"] == 3.0
        assert r.stats.malformed_rows == 1


def test_type_mismatch_is_per_feature():
    log = _log([("e", 1, {"x": "text", "y": 2})])
    spec = _spec(_f("bad", ["e"], 60, kind=CompKind.SUM), _f("ok", ["e"], 60, attrs=("y",), kind=CompKind.SUM))
    r = Engine(spec, log, Mode.FULL).extract(10)
    assert isinstance(r.values["bad"], FeatureError) and r.values["bad"].kind == "type_mismatch"
    assert r.values["ok"] == 2.0


def test_no_leakage_beyond_own_range():
    log = _log([("e", 1_000, {"x": 1}), ("e", 100_000, {"x": 2})])
    spec = _spec(_f("short", ["e"], 10, kind=CompKind.SUM), _f("long", ["e"], 1000, kind=CompKind.SUM))
    r = Engine(spec, log, Mode.FUSED).extract(105_000)
    assert r.values == {"short": 2.0, "long": 3.0}


def test_request_before_cached_position_clears_cache():
    log = _log([("e", ts, {"x": 1}) for ts in range(0, 100_000, 1000)])
    spec = _spec(_f("c", ["e"], 30))
    full, naive = Engine(spec, log, Mode.FULL), Engine(spec, log, Mode.NAIVE)
    for t in (90_000, 40_000, 95_000):
        assert full.extract(t).values == naive.extract(t).values


def test_cache_transparency_random_sequences():
    for seed in range(200):
        run_interleaved(random_case(seed))


def test_record_is_json_ready():
    import json

    log = _log([("e", 1, {"x": [1, 2]})])
    spec = _spec(_f("c", ["e"], 60, kind=CompKind.CONCAT))
    rec = Engine(spec, log).extract(10).to_record()
    assert json.loads(json.dumps(rec))["values"] == {"c": [[1, 2]]}
    assert not math.isnan(rec["stats"]["cost_units"])
