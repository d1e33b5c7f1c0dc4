from __future__ import annotations

import json
from dataclasses import replace

import pytest

from fexgraph.bench import (
    EquivalenceFailure,
    BenchReport,
    first_mismatch,
    parse_values,
    random_case,
    run_benchmark,
    run_interleaved,
    run_naive_baseline,
    run_scenario,
    sweep,
    values_match,
)
from fexgraph.cli import main, parse_duration_ms
from fexgraph.event_log import EventLog
from fexgraph.executor import FeatureError, Mode
from fexgraph.feature_spec import CompKind, serialize_model_spec
from fexgraph.workload import bundled_scenario, generate_model_spec, generate_trace
from helpers import overlapping_spec


def _small_scenario():
    sc = bundled_scenario("video_app")
    return replace(sc, schedule=replace(sc.schedule, count=8))


def test_values_match_tolerances():
    assert values_match(CompKind.SUM, 1.0, 1.0 + 1e-12)
    assert not values_match(CompKind.SUM, 1.0, 1.0 + 1e-6)
    assert not values_match(CompKind.MIN, 1.0, 1.0 + 1e-12)
    assert values_match(CompKind.CONCAT, ["a"], ["a"])
    assert values_match(CompKind.AVG, None, None)
    assert values_match(CompKind.SUM, FeatureError("type_mismatch", "x"), FeatureError("type_mismatch", "y"))
    assert not values_match(CompKind.SUM, FeatureError("type_mismatch", "x"), 1.0)


def test_naive_baseline_decode_count():
    log = EventLog()
    for i in range(100):
        log.append("e", 1000 + i, {"x": i})
    results = run_naive_baseline(overlapping_spec(7), log, [10_000])
    assert results[0].stats.decode_calls == 700


def test_run_scenario_report_files(tmp_path):
    report = run_scenario(_small_scenario(), output_path=tmp_path)
    assert report.equivalence == "PASS"
    assert set(report.modes) == {"naive", "fused", "cache_only", "full"}
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["modes"]["full"]["op_speedup"] > 1
    lines = (tmp_path / "requests.jsonl").read_text().splitlines()
    assert len(lines) == 4 * 8
    assert {json.loads(line)["mode"] for line in lines} == set(report.modes)
    table = (tmp_path / "report.txt").read_text()
    assert "equivalence PASS" in table and "stub inference" in table


def test_counter_speedups_reproducible():
    a = run_scenario(_small_scenario())
    b = run_scenario(_small_scenario())
    for mode in a.modes:
        assert a.op_speedup(mode) == b.op_speedup(mode)
        assert a.totals(mode).cost_units == b.totals(mode).cost_units


def test_equivalence_failure_reports_first_diff():
    sc = _small_scenario()
    report = run_scenario(sc)
    spec = generate_model_spec(sc)
    bad = replace(report.results["full"][2], values=dict(report.results["full"][2].values))
    fid = spec.features[0].feature_id
    bad.values[fid] = "tampered"
    diff = first_mismatch(spec, report.results["naive"][2], bad)
    assert diff["feature_id"] == fid and diff["actual"] == "tampered"
    err = EquivalenceFailure({**diff, "mode": "full"})
    assert fid in str(err)


def test_run_benchmark_always_includes_naive():
    log = EventLog()
    for i in range(20):
        log.append("e", i * 1000, {"x": i})
    report = run_benchmark(overlapping_spec(3), log, [30_000, 40_000], ["full"])
    assert report.modes == ["naive", "full"]
    assert isinstance(report, BenchReport)


def test_parse_values():
    assert parse_values("0:0.9:0.1") == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    assert parse_values("10,30,60") == [10.0, 30.0, 60.0]


def test_parse_duration():
    assert parse_duration_ms("60s") == 60_000
    assert parse_duration_ms("500ms") == 500
    assert parse_duration_ms("2m") == 120_000
    assert parse_duration_ms("1h") == 3_600_000
    assert parse_duration_ms("1.5") == 1500


def test_small_sweeps_pass_equivalence(tmp_path):
    sc = bundled_scenario("sweep")
    sc = replace(sc, schedule=replace(sc.schedule, count=6))
    rows = sweep(sc, "redundancy", [0.0, 0.9], output_path=tmp_path)
    assert all(r["equivalence"] == "PASS" for r in rows)
    assert rows[1]["full_op_speedup"] >= rows[0]["full_op_speedup"]
    assert (tmp_path / "sweep_redundancy.txt").exists()
    with pytest.raises(ValueError):
        sweep(sc, "budget", [1])


def test_random_cases_are_deterministic():
    assert random_case(5) == random_case(5)
    a = run_interleaved(random_case(5))
    b = run_interleaved(random_case(5))
    assert [r.values for r in a["full"]] == [r.values for r in b["full"]]


def test_cli_end_to_end(tmp_path, capsys):
    sc = bundled_scenario("video_app")
    trace, spec = tmp_path / "t.log", tmp_path / "m.json"
    assert main(["gen", "--scenario", "video_app", "--out", str(trace), "--spec-out", str(spec)]) == 0
    assert spec.read_text() == serialize_model_spec(generate_model_spec(sc))
    assert main(["optimize", "--spec", str(spec), "--dump-before", str(tmp_path / "a.dot"), "--dump-after", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.dot").read_text().startswith("digraph")
    assert json.loads((tmp_path / "b.json").read_text())["graph"] == "optimized"
    assert main(["redundancy", "--spec", str(spec)]) == 0
    out = tmp_path / "out"
    rc = main(["bench", "--spec", str(spec), "--trace", str(trace), "--modes", "naive,fused,cache,full", "--interval", "60s", "--start", "3600s", "--count", "5", "--report", str(out)])
    assert rc == 0
    assert (out / "report.txt").exists() and (out / "requests.jsonl").exists()
    assert "equivalence PASS" in capsys.readouterr().out


def test_cli_reports_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["optimize", "--spec", str(bad)]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["gen", "--scenario", "missing", "--out", str(tmp_path / "x.log")]) == 1


def test_cli_ndjson_trace(tmp_path):
    trace = tmp_path / "t.ndjson"
    generate_trace(bundled_scenario("uniform"), trace)
    spec = tmp_path / "m.json"
    spec.write_text(serialize_model_spec(generate_model_spec(bundled_scenario("uniform"))))
    assert main(["bench", "--spec", str(spec), "--trace", str(trace), "--modes", "full", "--count", "3", "--start", "600s"]) == 0
    assert Mode.parse("cache") is Mode.CACHE_ONLY
