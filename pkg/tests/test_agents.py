from __future__ import annotations

import json
import random

import pytest

from firmguard import agents
from firmguard.agents import (
    AdvisoryThresholds,
    AgentKind,
    AgentVerdict,
    ConfusionMatrix,
    Verdict,
)
from firmguard.llm import Completion, PatchProposal, Proposer, TransportError
from firmguard.model import Finding, IterationRecord, Source, SourceTree
from firmguard.timing import compute_report, parse_timing_log

SOURCE = SourceTree.from_mapping(
    {
        "main.c": (
            "#include <stdio.h>\n"
            "static void banner(void)\n{\n"
            '    printf("no overflow here");\n'
            "}\n"
            "char buf[8];\n"
            "void copy(const char *s) { strcpy(buf, s); }\n"
        )
    }
)


class Scripted:
    def __init__(self, *answers):
        self.answers = list(answers)
        self.requests = []
        self.tokens_used = 0

    def complete(self, request):
        self.requests.append(request)
        answer = self.answers.pop(0)
        if isinstance(answer, Exception):
            raise answer
        return Completion(answer, 5)


def _f(model, rule_id, evidence, source=Source.FUZZ):
    return Finding.create(model.rule(rule_id), evidence, source)


def test_threat_agent_rejects_printed_literal(model):
    false_pos = _f(model, "log-overflow", 'printf("no overflow here")')
    real = _f(model, "log-overflow", "OVERFLOW len=40")
    verdicts = agents.threat_agent_review([false_pos, real, real], SOURCE, model=model, exit_statuses={"crash": 2})
    by_subject = {v.subject: v for v in verdicts}
    assert len(verdicts) == 2
    assert by_subject[false_pos.finding_id].verdict is Verdict.REJECT
    assert "main.c:4" in by_subject[false_pos.finding_id].annotation
    assert by_subject[real.finding_id].verdict is Verdict.CONFIRM
    assert "corroborated by 2 crash" in by_subject[real.finding_id].annotation


def test_literal_match_outside_string_is_confirmed(model):
    tree = SourceTree.from_mapping({"main.c": 'report(overflow); puts("overflow");\n'})
    f = _f(model, "log-overflow", 'report(overflow); puts("overflow");')
    [v] = agents.threat_agent_review([f], tree, model=model)
    assert v.verdict is Verdict.CONFIRM


def test_threat_agent_enrichment_and_fallback(model):
    real = _f(model, "log-overflow", "OVERFLOW len=40")
    backend = Scripted(f"- {real.finding_id}: strcpy into buf[8] in copy()\n- deadbeef: ignored\n")
    verdicts = agents.threat_agent_review([real], SOURCE, backend, model=model)
    assert [v.verdict for v in verdicts] == [Verdict.CONFIRM, Verdict.ENRICH]
    assert verdicts[1].annotation == "strcpy into buf[8] in copy()"
    failing = Scripted(*[TransportError("down")] * 3)
    verdicts = agents.threat_agent_review([real], SOURCE, failing, model=model)
    assert [v.verdict for v in verdicts] == [Verdict.CONFIRM]


def test_verdict_validation_and_round_trip():
    with pytest.raises(ValueError):
        AgentVerdict(AgentKind.PERFORMANCE, "x", Verdict.CONFIRM)
    patch = PatchProposal("main.c", "x\n", "r", Proposer.PERFORMANCE)
    v = AgentVerdict(AgentKind.PERFORMANCE, "Net", Verdict.ADVISE, "note", patch)
    assert AgentVerdict.from_dict(v.to_dict()) == v
    c = AgentVerdict(AgentKind.COMPLIANCE, "campaign", Verdict.PASS, check="deadlines-met")
    assert AgentVerdict.from_dict(json.loads(json.dumps(c.to_dict()))) == c


def test_merge_is_order_independent():
    vs = [
        AgentVerdict(AgentKind.THREAT, s, Verdict.CONFIRM) for s in "dcba"
    ] + [AgentVerdict(AgentKind.PERFORMANCE, "Net", Verdict.ADVISE)]
    shuffled = vs[:]
    random.Random(4).shuffle(shuffled)
    assert agents.merge_verdicts(vs[:2], vs[2:]) == agents.merge_verdicts(shuffled)


LOG = "\n".join(
    ["TICK task=Sensor exec_ms=3 deadline_ms=10", "TICK task=Sensor exec_ms=5 deadline_ms=10", "TICK task=Sensor exec_ms=4 deadline_ms=10"]
    + ["TICK task=Net exec_ms=12 deadline_ms=20"] * 2
)


def test_performance_agent_advises_per_task():
    report = compute_report(parse_timing_log(LOG))
    verdicts = agents.performance_agent_review(report, SOURCE, thresholds=AdvisoryThresholds(wcet_ms=10, jitter_us=200))
    assert [(v.subject, v.verdict) for v in verdicts] == [("Net", Verdict.ADVISE), ("Sensor", Verdict.ADVISE)]
    assert verdicts[0].annotation == "task Net: reduce WCET: 12 ms exceeds advisory 10 ms"
    assert verdicts[1].annotation == "task Sensor: reduce jitter: 816.5 us exceeds advisory 200 us"
    quiet = agents.performance_agent_review(report, SOURCE, thresholds=AdvisoryThresholds(wcet_ms=50, jitter_us=5000))
    assert quiet == []
    with pytest.raises(ValueError):
        agents.performance_agent_review(compute_report([]), SOURCE)


def test_performance_agent_attaches_patch():
    report = compute_report(parse_timing_log("TICK task=Net exec_ms=30 deadline_ms=50\n"))
    backend = Scripted("Split the loop.\n```c\nint fast;\n```\n")
    [v] = agents.performance_agent_review(report, SOURCE, backend)
    assert v.suggested_patch.proposed_by is Proposer.PERFORMANCE
    assert "reduce WCET" in backend.requests[0].user_prompt


def _record(model, findings=(), log=LOG, patches=()):
    return IterationRecord(0, "0" * 64, list(findings), compute_report(parse_timing_log(log)), patches=list(patches))


def test_compliance_checks(model):
    record = _record(model, log=LOG + "\nMISSED DEADLINE task=Net\n")
    checks = {v.check: v for v in agents.compliance_agent_check(record, model)}
    assert set(checks) == set(agents.COMPLIANCE_CHECKS)
    assert all(v.subject == "campaign" for v in checks.values())
    assert checks["deadlines-met"].verdict is Verdict.FAIL
    assert checks["rule-coverage"].verdict is Verdict.PASS
    assert not agents.compliance_passed(checks.values())

    critical = _f(model, "log-overflow", "OVERFLOW")
    orphan = PatchProposal("main.c", "x\n")
    record = _record(model, [critical], patches=[orphan])
    checks = {v.check: v.verdict for v in agents.compliance_agent_check(record, model)}
    assert checks["no-open-critical"] is Verdict.FAIL
    assert checks["patch-traceability"] is Verdict.FAIL
    traced = PatchProposal("main.c", "x\n", addresses=(critical.finding_id,))
    checks = {v.check: v.verdict for v in agents.compliance_agent_check(record, model, [traced])}
    assert checks["patch-traceability"] is Verdict.PASS
    with pytest.raises(ValueError):
        agents.compliance_agent_check(IterationRecord(0, "0" * 64), model)


def test_rejected_findings_do_not_block_compliance(model):
    critical = _f(model, "log-overflow", "OVERFLOW")
    record = _record(model, [critical])
    record.verdicts = [AgentVerdict(AgentKind.THREAT, critical.finding_id, Verdict.REJECT)]
    checks = {v.check: v.verdict for v in agents.compliance_agent_check(record, model)}
    assert checks["no-open-critical"] is Verdict.PASS


def test_ada_scoring(tmp_path):
    verdicts = [AgentVerdict(AgentKind.THREAT, f"f{i}", Verdict.CONFIRM) for i in range(12)]
    verdicts.append(AgentVerdict(AgentKind.THREAT, "f12", Verdict.REJECT))
    labels = [{"finding-id": f"f{i}", "is-true-vulnerability": i != 11} for i in range(12)]
    path = tmp_path / "truth.json"
    path.write_text(json.dumps(labels), encoding="utf-8")
    matrix, score = agents.score_ada(verdicts, agents.load_ground_truth(path))
    assert matrix == ConfusionMatrix(tp=11, tn=0, fp=1, fn=0)
    assert score == pytest.approx(11 / 12)
    with pytest.raises(ValueError, match="never reviewed"):
        agents.score_ada(verdicts, {"zzz": True})
    with pytest.raises(ValueError, match="ADA undefined"):
        agents.ada(ConfusionMatrix())
    path.write_text('[{"finding-id": "a", "is-true-vulnerability": "yes"}]', encoding="utf-8")
    with pytest.raises(ValueError):
        agents.load_ground_truth(path)
