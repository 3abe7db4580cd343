"""Threat, performance and compliance agents plus ADA scoring.

Every agent is a deterministic rule layer with an optional LLM layer on top.
The rule layer alone decides confirm/reject, advise and pass/fail; the LLM
layer only adds ``enrich`` annotations or suggested patches, and any backend
failure drops back to the rule layer with a warning.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

from firmguard.llm import (
    Backend,
    GatewayError,
    GenerationRequest,
    PatchProposal,
    Proposer,
    Role,
    VulnerabilityReport,
    complete_with_retry,
    generate_patch,
    load_prompts,
    render,
    render_findings,
    render_sources,
)
from firmguard.model import Detector, Finding, IterationRecord, Severity, SourceTree, ThreatModel
from firmguard.timing import TimingReport

log = logging.getLogger(__name__)


class AgentKind(str, Enum):
    THREAT = "threat"
    PERFORMANCE = "performance"
    COMPLIANCE = "compliance"


class Verdict(str, Enum):
    CONFIRM = "confirm"
    REJECT = "reject"
    ENRICH = "enrich"
    ADVISE = "advise"
    PASS = "pass"
    FAIL = "fail"


_ALLOWED = {
    AgentKind.THREAT: {Verdict.CONFIRM, Verdict.REJECT, Verdict.ENRICH},
    AgentKind.PERFORMANCE: {Verdict.ADVISE},
    AgentKind.COMPLIANCE: {Verdict.PASS, Verdict.FAIL},
}


@dataclass(frozen=True)
class AgentVerdict:
    agent: AgentKind
    subject: str
    verdict: Verdict
    annotation: str = ""
    suggested_patch: PatchProposal | None = None
    check: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "agent", AgentKind(self.agent))
        object.__setattr__(self, "verdict", Verdict(self.verdict))
        if self.verdict not in _ALLOWED[self.agent]:
            raise ValueError(f"{self.agent.value} agent cannot emit {self.verdict.value}")

    def sort_key(self) -> tuple[str, str, str, str]:
        return (self.agent.value, self.subject, self.check or "", self.verdict.value)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "agent": self.agent.value,
            "subject": self.subject,
            "verdict": self.verdict.value,
            "annotation": self.annotation,
            "suggested-patch": None if self.suggested_patch is None else self.suggested_patch.to_dict(),
        }
        if self.check is not None:
            d["check"] = self.check
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AgentVerdict:
        patch = d.get("suggested-patch")
        return cls(
            AgentKind(d["agent"]),
            d["subject"],
            Verdict(d["verdict"]),
            d.get("annotation", ""),
            None if patch is None else PatchProposal.from_dict(patch),
            d.get("check"),
        )


def merge_verdicts(*groups: Iterable[AgentVerdict]) -> list[AgentVerdict]:
    """Order-independent merge: the result depends only on the multiset of verdicts."""
    return sorted((v for g in groups for v in g), key=AgentVerdict.sort_key)


# -- threat agent -------------------------------------------------------------


_STRING_LITERAL = re.compile(r'"(?:\\.|[^"\\\n])*"')


def _normalize_line(text: str) -> str:
    return "".join(text.split()).rstrip(";")


def _literal_only_match(line: str, finding: Finding, model: ThreatModel | None) -> bool:
    """True when the finding's rule matches inside a string literal of ``line`` and nowhere else."""
    literals = _STRING_LITERAL.findall(line)
    if not literals:
        return False
    if model is None:
        return True
    try:
        rule = model.rule(finding.rule_id)
    except KeyError:
        return True
    if rule.detector is not Detector.LOG_PATTERN:
        return False
    outside = _STRING_LITERAL.sub('""', line)
    return any(rule.matches(lit) for lit in literals) and not rule.matches(outside)


def _literal_source_line(finding: Finding, tree: SourceTree, model: ThreatModel | None) -> tuple[str, int] | None:
    target = _normalize_line(finding.evidence)
    if not target:
        return None
    for path, text in tree.files:
        for lineno, line in enumerate(text.splitlines(), 1):
            if _normalize_line(line) == target and _literal_only_match(line, finding, model):
                return path, lineno
    return None


def _parse_enrichment(text: str, ids: set[str]) -> dict[str, str]:
    notes: dict[str, str] = {}
    for line in text.splitlines():
        key, sep, note = line.strip().lstrip("-* ").partition(":")
        key = key.strip().strip("`")
        if sep and key in ids and note.strip() and key not in notes:
            notes[key] = " ".join(note.split())
    return notes


def threat_agent_review(
    findings: list[Finding],
    tree: SourceTree,
    backend: Backend | None = None,
    *,
    model: ThreatModel | None = None,
    exit_statuses: dict[str, int] | None = None,
    prompts: dict[str, str] | None = None,
) -> list[AgentVerdict]:
    """Exactly one confirm or reject per distinct finding, plus optional enrich verdicts.

    Rule layer: a finding whose evidence is a verbatim source line, and whose
    rule only matches inside a string literal on that line, is a program
    printing a constant rather than a defect and is rejected. Everything else
    is confirmed; CWE-120 findings are noted as corroborated when the fuzz
    campaign also saw crash exits.
    """
    crashes = (exit_statuses or {}).get("crash", 0)
    verdicts: list[AgentVerdict] = []
    confirmed: list[Finding] = []
    seen: set[str] = set()
    for f in findings:
        if f.finding_id in seen:
            continue
        seen.add(f.finding_id)
        hit = _literal_source_line(f, tree, model)
        if hit is not None:
            verdicts.append(
                AgentVerdict(
                    AgentKind.THREAT,
                    f.finding_id,
                    Verdict.REJECT,
                    f"evidence is the string literal printed at {hit[0]}:{hit[1]}, not a defect",
                )
            )
            continue
        if f.cwe.id == 120 and crashes:
            note = f"{f.cwe.label} corroborated by {crashes} crash exit(s) during fuzzing"
        else:
            note = f"{f.cwe.label} {f.cwe.name} reported by {f.source.value} ({f.rule_id})"
        verdicts.append(AgentVerdict(AgentKind.THREAT, f.finding_id, Verdict.CONFIRM, note))
        confirmed.append(f)

    if backend is not None and confirmed:
        try:
            prompts = prompts or load_prompts()
            request = GenerationRequest(
                Role.REVIEW,
                prompts["threat_review.system.txt"],
                render(prompts["threat_review.user.txt"], findings=render_findings(confirmed), sources=render_sources(tree)),
                temperature=0.2,
                max_output_tokens=2048,
            )
            text = complete_with_retry(backend, request).text
            for fid, note in sorted(_parse_enrichment(text, {f.finding_id for f in confirmed}).items()):
                verdicts.append(AgentVerdict(AgentKind.THREAT, fid, Verdict.ENRICH, note))
        except GatewayError as exc:
            log.warning("threat agent LLM pass failed, continuing rules-only: %s", exc)
    return merge_verdicts(verdicts)


# -- performance agent --------------------------------------------------------


@dataclass(frozen=True)
class AdvisoryThresholds:
    wcet_ms: float = 10.0
    jitter_us: float = 200.0

    def __post_init__(self) -> None:
        if self.wcet_ms <= 0 or self.jitter_us <= 0:
            raise ValueError("advisory thresholds must be positive")


def performance_agent_review(
    report: TimingReport,
    tree: SourceTree,
    backend: Backend | None = None,
    *,
    thresholds: AdvisoryThresholds = AdvisoryThresholds(),
    prompts: dict[str, str] | None = None,
) -> list[AgentVerdict]:
    """One ``advise`` verdict per task over its WCET or jitter advisory."""
    if not report.tasks:
        raise ValueError("timing report is empty")
    verdicts = []
    for name in sorted(report.tasks):
        stats = report.tasks[name]
        notes = []
        if stats.wcet_ms > thresholds.wcet_ms:
            notes.append(f"reduce WCET: {stats.wcet_ms:g} ms exceeds advisory {thresholds.wcet_ms:g} ms")
        if stats.jitter_us > thresholds.jitter_us:
            notes.append(f"reduce jitter: {stats.jitter_us:.1f} us exceeds advisory {thresholds.jitter_us:g} us")
        if not notes:
            continue
        annotation = f"task {name}: " + "; ".join(notes)
        patch = None
        if backend is not None:
            try:
                proposals = generate_patch(VulnerabilityReport([], advisories=[annotation]), tree, backend, prompts=prompts)
                patch = PatchProposal(
                    proposals[0].target_file,
                    proposals[0].replacement_source,
                    proposals[0].rationale,
                    Proposer.PERFORMANCE,
                )
            except GatewayError as exc:
                log.warning("performance agent LLM pass failed for %s, continuing rules-only: %s", name, exc)
        verdicts.append(AgentVerdict(AgentKind.PERFORMANCE, name, Verdict.ADVISE, annotation, patch))
    return merge_verdicts(verdicts)


# -- compliance agent ---------------------------------------------------------


COMPLIANCE_CHECKS = ("rule-coverage", "no-open-critical", "deadlines-met", "patch-traceability")


def compliance_agent_check(
    record: IterationRecord,
    model: ThreatModel,
    applied_patches: list[PatchProposal] | None = None,
) -> list[AgentVerdict]:
    """One pass/fail verdict per check, subject ``campaign``.

    ``applied_patches`` are the patches that produced this iteration's
    firmware; by default the record's own patches are checked.
    """
    if record.metrics is None and not record.findings and record.timing is None and record.build is None:
        raise ValueError("record has neither findings nor metrics")
    patches = record.patches if applied_patches is None else applied_patches
    results: list[tuple[str, bool, str]] = []

    uncovered = [t.cwe.label for t in model.threats if not any(r.enabled for r in model.rules_for(t.cwe.id))]
    results.append(
        ("rule-coverage", not uncovered, f"enable a detection rule for {', '.join(uncovered)}" if uncovered else "every threat has an enabled rule")
    )

    critical = [f.finding_id for f in record.actionable() if f.severity >= Severity.CRITICAL]
    results.append(
        (
            "no-open-critical",
            not critical,
            f"remediate {len(critical)} open critical finding(s): {', '.join(critical)}" if critical else "no open critical findings",
        )
    )

    if record.build is not None and not record.build.success:
        results.append(("deadlines-met", False, "firmware did not build; deadlines cannot be verified"))
    elif record.timing is None:
        results.append(("deadlines-met", True, "no timing samples; nothing missed"))
    else:
        misses = record.timing.deadline_misses
        results.append(
            ("deadlines-met", misses == 0, f"fix {misses} deadline miss(es)" if misses else "zero deadline misses")
        )

    orphans = [p.target_file for p in patches if not p.addresses]
    results.append(
        (
            "patch-traceability",
            not orphans,
            f"tie patches for {', '.join(orphans)} to the findings they fix" if orphans else "every applied patch references a finding",
        )
    )
    return merge_verdicts(
        AgentVerdict(AgentKind.COMPLIANCE, "campaign", Verdict.PASS if ok else Verdict.FAIL, text, check=name)
        for name, ok, text in results
    )


def compliance_passed(verdicts: Iterable[AgentVerdict]) -> bool:
    return not any(v.agent is AgentKind.COMPLIANCE and v.verdict is Verdict.FAIL for v in verdicts)


# -- ADA ----------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def accuracy(self) -> float:
        return ada(self)

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def ada(matrix: ConfusionMatrix) -> float:
    """(TP + TN) / (TP + TN + FP + FN)."""
    if matrix.total < 1:
        raise ValueError("ADA undefined: empty evaluation set")
    return (matrix.tp + matrix.tn) / matrix.total


def load_ground_truth(path: str | Path) -> dict[str, bool]:
    """JSON list of ``{"finding-id": ..., "is-true-vulnerability": bool}`` records."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    labels: dict[str, bool] = {}
    for i, rec in enumerate(doc):
        if not isinstance(rec.get("is-true-vulnerability"), bool):
            raise ValueError(f"{path}: record {i} lacks a boolean is-true-vulnerability")
        labels[rec["finding-id"]] = rec["is-true-vulnerability"]
    return labels


def score_ada(verdicts: Iterable[AgentVerdict], ground_truth: dict[str, bool]) -> tuple[ConfusionMatrix, float]:
    decided = {
        v.subject: v.verdict
        for v in verdicts
        if v.agent is AgentKind.THREAT and v.verdict in (Verdict.CONFIRM, Verdict.REJECT)
    }
    missing = sorted(fid for fid in ground_truth if fid not in decided)
    if missing:
        raise ValueError(f"ground truth labels findings that were never reviewed: {', '.join(missing[:5])}")
    tp = tn = fp = fn = 0
    for fid, is_vuln in ground_truth.items():
        confirmed = decided[fid] is Verdict.CONFIRM
        if confirmed and is_vuln:
            tp += 1
        elif confirmed:
            fp += 1
        elif is_vuln:
            fn += 1
        else:
            tn += 1
    matrix = ConfusionMatrix(tp, tn, fp, fn)
    return matrix, ada(matrix)
