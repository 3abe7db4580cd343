from __future__ import annotations

import time
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from firmguard import fuzz
from firmguard.fuzz import FuzzPlan, Generator, SplitMix64, generate_inputs, generate_trial
from firmguard.harness import ExitKind, ExitStatus, RunResult, TargetConfig, TargetHarness
from firmguard.model import SourceTree

FAST = TargetConfig(startup_grace_ms=50, run_timeout_ms=3000, freeze_silence_ms=500, input_interval_ms=0)
OVERFLOW_STUB = SourceTree.from_mapping({"main.c": "//@stub overflow-over 32\n//@stub crash-over 60 SIGSEGV\n"})


def test_splitmix64_reference_vectors():
    rng = SplitMix64(1234567)
    assert [rng.next_u64() for _ in range(3)] == [0x599ED017FB08FC85, 0x2C73F08458540FA5, 0x883EBCE5A3F27C77]
    assert SplitMix64(0).next_u64() == 0xE220A8397B1DCDAF


@given(st.integers(min_value=1, max_value=2**40))
def test_below_stays_in_range(n):
    rng = SplitMix64(n)
    assert all(0 <= rng.below(n) < n for _ in range(20))


def test_trials_are_independent_of_order():
    plan = FuzzPlan(seed=7, trials=10)
    forward = [generate_inputs(plan, t) for t in range(10)]
    backward = [generate_inputs(plan, t) for t in reversed(range(10))][::-1]
    assert forward == backward
    assert generate_inputs(FuzzPlan(seed=8, trials=10), 0) != forward[0]


@settings(max_examples=50)
@given(st.integers(min_value=0, max_value=2**64 - 1), st.integers(min_value=1, max_value=128))
def test_inputs_respect_max_len(seed, max_len):
    plan = FuzzPlan(seed=seed, trials=3, max_input_len=max_len, generators=tuple(Generator))
    for t in range(3):
        for inp in generate_trial(plan, t):
            assert 0 <= len(inp.data) <= max_len


def test_boundary_lengths_cycle():
    plan = FuzzPlan(seed=1, trials=1, inputs_per_trial=5, max_input_len=10, generators=(Generator.BOUNDARY_LENGTHS,))
    lengths = [len(b) for b in generate_inputs(plan, 0)]
    assert lengths == [0, 1, 9, 10, 10]
    assert generate_inputs(plan, 0)[-1].endswith(fuzz.BOUNDARY_MARKER)


def test_flood_bursts_follow_multiplier():
    plan = FuzzPlan(seed=1, trials=1, inputs_per_trial=4, generators=(Generator.FLOOD,), flood_rate_multiplier=2.5)
    inputs = generate_trial(plan, 0)
    assert len(inputs) == 10
    assert all(i.burst and len(i.data) <= fuzz.FLOOD_MAX_LEN for i in inputs)
    assert plan.dos_enabled and not FuzzPlan(seed=1, trials=1).dos_enabled


def test_plan_validation_and_round_trip():
    with pytest.raises(ValueError):
        FuzzPlan(seed=1, trials=0)
    with pytest.raises(ValueError):
        FuzzPlan(seed=1, trials=1, generators=(Generator.FLOOD, Generator.FLOOD))
    with pytest.raises(IndexError):
        generate_trial(FuzzPlan(seed=1, trials=2), 2)
    plan = FuzzPlan(seed=-1, trials=3, generators=(Generator.FLOOD,))
    assert plan.seed == 2**64 - 1
    assert FuzzPlan.from_dict(plan.to_dict()) == plan


def _campaign(tmp_path, name, model, trials=24):
    harness = TargetHarness(FAST, tmp_path / name)
    artifact = harness.build(OVERFLOW_STUB).artifact
    plan = FuzzPlan(seed=99, trials=trials, max_input_len=64)
    return fuzz.run_campaign(plan, artifact, harness, model, corpus_dir=tmp_path / name / "corpus", workers=4)


def _corpus(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_campaign_determinism(tmp_path, model):
    a, cov_a = _campaign(tmp_path, "a", model)
    b, cov_b = _campaign(tmp_path, "b", model)
    ids_a = [f.finding_id for o in a for f in o.findings]
    ids_b = [f.finding_id for o in b for f in o.findings]
    assert ids_a == ids_b and Counter(ids_a) == Counter(ids_b)
    assert _corpus(tmp_path / "a" / "corpus") == _corpus(tmp_path / "b" / "corpus")
    assert cov_a == cov_b
    rules = {f.rule_id for f in fuzz.campaign_findings(a)}
    assert {"log-overflow", "exit-crash"} <= rules
    kinds = {o.run.exit_status.kind for o in a}
    assert kinds == {ExitKind.CLEAN, ExitKind.CRASH}
    assert cov_a == pytest.approx(len({(i.generator, o.run.exit_status.kind) for o in a for i in o.inputs}) / 16)


def test_thousand_trials_under_a_minute(tmp_path, model):
    t0 = time.monotonic()
    outcomes, _ = _campaign(tmp_path, "big", model, trials=1000)
    assert len(outcomes) == 1000
    assert time.monotonic() - t0 < 60


def _run(stdout="", kind=ExitKind.CLEAN, signal=None):
    return RunResult(stdout=stdout, stderr="", exit_status=ExitStatus(kind, signal=signal), duration_ms=1, injected_inputs=(), truncated=False)


def test_scan_logs_classifies_lines_and_exit(model):
    found = fuzz.scan_logs(_run("OVERFLOW detected\nOVERFLOW detected\nok\n", ExitKind.CRASH, "SIGABRT"), model)
    assert [f.rule_id for f in found] == ["log-overflow", "exit-crash"]
    assert "SIGABRT" in found[1].evidence
    frozen = fuzz.scan_logs(_run(kind=ExitKind.FREEZE), model, freeze_silence_ms=750)
    assert [f.evidence for f in frozen] == ["freeze after 750 ms silence"]
    assert fuzz.scan_logs(_run("all good\n"), model) == []
