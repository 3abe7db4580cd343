from __future__ import annotations

import csv
import io
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from firmguard import metrics as m
from firmguard.agents import AgentKind, AgentVerdict, ConfusionMatrix, Verdict, ada
from firmguard.harness import BuildResult, FailureClass
from firmguard.model import Finding, IterationRecord, Source
from firmguard.timing import compute_report, parse_timing_log


def test_formulas_match_oracles_on_random_operands():
    for ops in oracles.operand_sets(2000, seed=11):
        assert oracles.close(m.vrr(*ops["vrr"]), oracles.vrr(*ops["vrr"]))
        assert oracles.close(m.sci(m.CoverageVector(*ops["sci"])), oracles.sci(*ops["sci"]))
        assert oracles.close(m.tmcs(*ops["tmcs"]), oracles.tmcs(*ops["tmcs"]))
        assert m.wcet(ops["times"]) == oracles.wcet(ops["times"])
        assert oracles.close(m.jitter(ops["times"]), oracles.jitter(ops["times"]))
        assert oracles.close(ada(ConfusionMatrix(*ops["ada"])), oracles.ada(*ops["ada"]))
        assert oracles.close(m.iei(m.IterationDelta(*ops["iei"])), oracles.iei(*ops["iei"]))


def test_published_ratios():
    assert round(m.vrr(12, 13), 2) == 92.31
    assert round(100 * ada(ConfusionMatrix(tp=11, tn=0, fp=1, fn=0)), 2) == 91.67


def test_edge_cases():
    assert m.vrr(0, 0) == 100.0
    with pytest.raises(ValueError):
        m.vrr(3, 2)
    with pytest.raises(ValueError):
        m.tmcs(1, 0)
    with pytest.raises(ValueError):
        m.CoverageVector(1.5, 0, 0)
    with pytest.raises(ValueError):
        m.CoverageVector(0, 0, 0, 0, 0, 0)
    with pytest.raises(ValueError):
        m.IterationDelta(1, 0, 0)
    with pytest.raises(ValueError):
        m.wcet([])
    assert m.jitter([3, 5, 4]) * 1000 == pytest.approx(816.4965809277)


@given(st.lists(st.floats(min_value=0, max_value=1e3), min_size=1, max_size=30))
def test_jitter_properties(times):
    j = m.jitter(times)
    assert j >= 0
    assert j <= (max(times) - min(times)) / 2 + 1e-9
    assert m.jitter([t + 7.0 for t in times]) == pytest.approx(j, abs=1e-6)


@given(st.integers(min_value=0, max_value=1000), st.integers(min_value=0, max_value=1000))
def test_vrr_bounds(a, b):
    fixed, total = min(a, b), max(a, b)
    assert 0.0 <= m.vrr(fixed, total) <= 100.0


def test_performance_score_clamps():
    assert m.performance_score(0, 0, 10, 1000) == 1.0
    assert m.performance_score(20, 5000, 10, 1000) == 0.0
    assert m.performance_score(5, 500, 10, 1000) == 0.5


def _record(model, index, findings=(), log="TICK task=A exec_ms=4 deadline_ms=10\n", rules=None, built=True, wall=0.0, tokens=0):
    build = BuildResult(built, "" if built else "error", None if built else FailureClass.LOGICAL)
    executed = [r.rule_id for r in model.rules] if rules is None else rules
    return IterationRecord(
        index, f"{index:064x}", list(findings), compute_report(parse_timing_log(log)) if built else None,
        build=build, executed_rules=executed, coverage={"fuzz": 0.5, "static": 1.0, "dynamic": 0.0},
        wall_clock_seconds=wall, token_cost=tokens,
    )


def test_snapshot_vrr_and_markers(model):
    a = Finding.create(model.rule("log-overflow"), "OVERFLOW", Source.FUZZ)
    b = Finding.create(model.rule("log-race"), "data race", Source.FUZZ)
    r0 = _record(model, 0, [a, b], tokens=1000)
    s0 = m.snapshot(r0, None, model)
    r0.metrics = s0
    assert s0.vrr is None and "baseline" in s0.markers
    assert s0.tmcs == pytest.approx(100 / 3)
    assert s0.sci == pytest.approx(0.5)
    r1 = _record(model, 1, [b])
    s1 = m.snapshot(r1, r0, model)
    assert s1.vrr == 50.0 and s1.tmcs == pytest.approx(200 / 3)
    expected = (m.security_score(50.0, 200 / 3) - m.security_score(0.0, 100 / 3)) / (1000 * 1e-6)
    assert s1.iei == pytest.approx(expected)
    r1.metrics = s1
    r2 = _record(model, 2, [b])
    assert m.snapshot(r2, r1, model).markers == ["no-resources"]
    r2.verdicts = [AgentVerdict(AgentKind.THREAT, b.finding_id, Verdict.REJECT)]
    assert m.snapshot(r2, r1, model).vrr == 100.0


def test_snapshot_untested_and_vacuous(model):
    r0 = _record(model, 0)
    r0.metrics = m.snapshot(r0, None, model)
    broken = _record(model, 1, built=False)
    s = m.snapshot(broken, r0, model)
    assert s.vrr is None and s.tmcs == 0.0 and s.markers == ["untested"]
    clean = _record(model, 1)
    assert "vacuous" in m.snapshot(clean, r0, model).markers


def test_tmcs_needs_executed_rules(model):
    r = _record(model, 0, rules=[])
    assert m.snapshot(r, None, model).tmcs == 0.0


def test_summarize_campaign(model):
    a = Finding.create(model.rule("log-overflow"), "OVERFLOW", Source.FUZZ)
    b = Finding.create(model.rule("log-race"), "data race", Source.FUZZ)
    r0 = _record(model, 0, [a], tokens=500)
    r0.metrics = m.snapshot(r0, None, model, confusion={"tp": 1, "tn": 0, "fp": 0, "fn": 0})
    r1 = _record(model, 1, [b], tokens=500)
    r1.metrics = m.snapshot(r1, r0, model, confusion={"tp": 0, "tn": 1, "fp": 1, "fn": 0})
    r2 = _record(model, 2, [])
    r2.metrics = m.snapshot(r2, r1, model)
    summary = m.summarize_campaign([r0, r1, r2], model)
    assert summary.vrr == 100.0 and summary.tmcs == 100.0
    assert summary.ada == pytest.approx(2 / 3)
    assert summary.raw_inputs["total"] == 2
    r2b = _record(model, 2, [b])
    assert m.summarize_campaign([r0, r1, r2b], model).vrr == 50.0


def test_snapshot_round_trip():
    s = m.MetricsSnapshot(50.0, 0.5, 100.0, 4.0, 10.0, 0.9, 1.5, ["x"], {"k": 1})
    assert m.MetricsSnapshot.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError):
        m.MetricsSnapshot(101.0, 0.5, 0.0)


def test_export_comparison_layout():
    snaps = {
        "All Agents": m.MetricsSnapshot(100.0, 0.9, 100.0, 8.4, 300.0, 0.95, 2.0),
        "LLM Only": m.MetricsSnapshot(80.0, 0.6, 66.0, 12.8, 600.0, None, -1.0),
    }
    art = m.export_comparison(snaps)
    assert art.columns == ["LLM Only", "All Agents"]
    rows = list(csv.reader(io.StringIO(art.table)))
    assert rows[0] == ["Metric", "LLM Only", "All Agents"]
    assert [r[0] for r in rows[1:]] == [label for _, label in m.METRIC_ROWS]
    assert rows[4] == ["WCET (ms)", "12.8", "8.4"]
    assert rows[6] == ["ADA (%)", "N/A", "95"]
    radar = [line.split("\t") for line in art.radar.splitlines()]
    wcet_axis = [k for k, (name, _) in enumerate(m.METRIC_ROWS) if name == "wcet-ms"][0]
    assert float(radar[1][wcet_axis]) == 1.0
    assert float(radar[0][wcet_axis]) == pytest.approx(8.4 / 12.8)
    assert radar[0][5] == "nan"
    assert float(radar[0][6]) == 0.0 and float(radar[1][6]) == 1.0
    for row in radar:
        assert all(x == "nan" or 0.0 <= float(x) <= 1.0 for x in row)
    assert "axis 3\twcet-ms\tinverted" in art.legend and "row 1\tAll Agents" in art.legend


def test_export_writes_files(tmp_path):
    art = m.export_comparison({"Only": m.MetricsSnapshot(None, 0.0, 0.0)})
    paths = art.write(tmp_path)
    assert sorted(p.name for p in paths.values()) == ["comparison.csv", "comparison.json", "radar-legend.txt", "radar.tsv"]
    assert "N/A" in paths["table"].read_text()
    assert all(v == "nan" or math.isfinite(float(v)) for v in paths["radar"].read_text().split())
    with pytest.raises(ValueError):
        m.export_comparison({})
