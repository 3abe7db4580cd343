"""Shared vocabulary: CWE classes, security rules, findings, iteration records.

The rules database is loaded once from a TOML file (see ``docs/threat-model.md``)
and is read-only afterwards. Every type here is an immutable value object so it
can be handed to concurrent workers without copying.
"""

from __future__ import annotations

import functools
import hashlib
import re
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from importlib import resources
from pathlib import Path, PurePosixPath
from typing import TYPE_CHECKING, Any

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

if TYPE_CHECKING:
    from firmguard.agents import AgentVerdict
    from firmguard.analyzers import AnalyzerRecord
    from firmguard.harness import BuildResult
    from firmguard.llm import PatchProposal
    from firmguard.metrics import MetricsSnapshot
    from firmguard.timing import TimingReport

EVIDENCE_CAP = 4096
ID_EVIDENCE_BYTES = 512

DEFAULT_THREAT_MODEL = "threat_model.default"


class ThreatModelError(ValueError):
    """Raised when a rules file cannot be parsed or fails validation."""


class InvalidTransition(ValueError):
    pass


class Category(str, Enum):
    MEMORY = "memory"
    CONCURRENCY = "concurrency"
    AVAILABILITY = "availability"
    OTHER = "other"


class Severity(IntEnum):
    """Ordered severity scale; integer encoding makes ``>=`` comparisons direct."""

    LOW = 1
    MEDIUM = 2
    HIGH = 3
    CRITICAL = 4

    @classmethod
    def parse(cls, text: str) -> Severity:
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown severity {text!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


class Detector(str, Enum):
    LOG_PATTERN = "log-pattern"
    ANALYZER_MESSAGE = "analyzer-message"
    TIMING_THRESHOLD = "timing-threshold"
    FREEZE = "freeze"
    CRASH = "crash"


class Source(str, Enum):
    FUZZ = "fuzz"
    STATIC_ANALYSIS = "static-analysis"
    RUNTIME_MONITOR = "runtime-monitor"
    AGENT = "agent"


class Status(str, Enum):
    OPEN = "open"
    FIXED = "fixed"
    REGRESSED = "regressed"
    ACCEPTED_RISK = "accepted-risk"


ALLOWED_TRANSITIONS = frozenset(
    {
        (Status.OPEN, Status.FIXED),
        (Status.FIXED, Status.REGRESSED),
        (Status.REGRESSED, Status.FIXED),
        (Status.OPEN, Status.ACCEPTED_RISK),
    }
)

# The three threats the pipeline is built around have fixed categories.
FIXED_CATEGORIES = {
    120: Category.MEMORY,
    362: Category.CONCURRENCY,
    400: Category.AVAILABILITY,
}

DEFAULT_SEVERITY = {
    120: Severity.CRITICAL,
    362: Severity.HIGH,
    400: Severity.HIGH,
}

TIMING_METRICS = ("wcet-ms", "jitter-us", "deadline-misses")
_THRESHOLD_RE = re.compile(r"^\s*(wcet-ms|jitter-us|deadline-misses)\s*<=\s*([0-9]+(?:\.[0-9]*)?(?:[eE][-+]?[0-9]+)?)\s*$")


@dataclass(frozen=True)
class CweClass:
    id: int
    name: str
    category: Category = Category.OTHER

    def __post_init__(self) -> None:
        if self.id <= 0:
            raise ValueError(f"CWE id must be positive, got {self.id}")
        fixed = FIXED_CATEGORIES.get(self.id)
        if fixed is not None and self.category is not fixed:
            raise ValueError(f"CWE-{self.id} must be in category {fixed.value}")

    @property
    def label(self) -> str:
        return f"CWE-{self.id}"


@dataclass(frozen=True)
class SecurityRule:
    rule_id: str
    cwe: CweClass
    detector: Detector
    pattern: str
    severity: Severity
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.detector in (Detector.LOG_PATTERN, Detector.ANALYZER_MESSAGE):
            if not self.pattern:
                raise ValueError(f"rule {self.rule_id}: {self.detector.value} rules need a pattern")
            try:
                re.compile(self.pattern)
            except re.error as exc:
                raise ValueError(f"rule {self.rule_id}: bad regular expression: {exc}") from None
        elif self.detector is Detector.TIMING_THRESHOLD:
            parse_threshold(self.pattern)

    def matches(self, text: str) -> bool:
        return _compiled(self.pattern).search(text) is not None

    def threshold(self) -> tuple[str, float]:
        return parse_threshold(self.pattern)


@functools.lru_cache(maxsize=512)
def _compiled(pattern: str) -> re.Pattern[str]:
    return re.compile(pattern)


def parse_threshold(pattern: str) -> tuple[str, float]:
    """Split ``"metric<=value"`` into ``(metric, value)``."""
    m = _THRESHOLD_RE.match(pattern)
    if not m:
        raise ValueError(f"timing threshold must look like 'metric<=value' with metric in {TIMING_METRICS}, got {pattern!r}")
    return m.group(1), float(m.group(2))


@dataclass(frozen=True)
class Threat:
    cwe: CweClass
    description: str
    mitigation: str


@dataclass(frozen=True)
class ThreatModel:
    threats: tuple[Threat, ...]
    rules: tuple[SecurityRule, ...]

    def __post_init__(self) -> None:
        if not self.threats or not self.rules:
            raise ThreatModelError("empty threat model")
        known = {t.cwe.id for t in self.threats}
        if len(known) != len(self.threats):
            raise ThreatModelError("duplicate threat entries")
        seen: set[str] = set()
        for rule in self.rules:
            if rule.rule_id in seen:
                raise ThreatModelError(f"duplicate rule id {rule.rule_id!r}")
            seen.add(rule.rule_id)
            if rule.cwe.id not in known:
                raise ThreatModelError(f"rule {rule.rule_id!r} references unknown CWE-{rule.cwe.id}")

    @property
    def cwes(self) -> dict[int, CweClass]:
        return {t.cwe.id: t.cwe for t in self.threats}

    def enabled(self, *detectors: Detector) -> list[SecurityRule]:
        return [r for r in self.rules if r.enabled and (not detectors or r.detector in detectors)]

    def rules_for(self, cwe_id: int) -> list[SecurityRule]:
        return [r for r in self.rules if r.cwe.id == cwe_id]

    def rule(self, rule_id: str) -> SecurityRule:
        for r in self.rules:
            if r.rule_id == rule_id:
                return r
        raise KeyError(rule_id)


def normalize_evidence(text: str) -> str:
    return " ".join(text.split())


def finding_id(rule_id: str, evidence: str) -> str:
    """128-bit hex digest of rule id + normalized evidence (first 512 bytes)."""
    head = normalize_evidence(evidence).encode("utf-8")[:ID_EVIDENCE_BYTES]
    digest = hashlib.sha256(rule_id.encode("utf-8") + b"\x00" + head)
    return digest.hexdigest()[:32]


def _cap(text: str, limit: int = EVIDENCE_CAP) -> str:
    raw = text.encode("utf-8")
    if len(raw) <= limit:
        return text
    return raw[:limit].decode("utf-8", errors="ignore")


@dataclass(frozen=True)
class Finding:
    finding_id: str
    rule_id: str
    cwe: CweClass
    severity: Severity
    source: Source
    evidence: str
    location: tuple[str, int] | None = None
    first_seen_iteration: int = 0
    status: Status = Status.OPEN

    @classmethod
    def create(
        cls,
        rule: SecurityRule,
        evidence: str,
        source: Source,
        location: tuple[str, int] | None = None,
        iteration: int = 0,
    ) -> Finding:
        evidence = _cap(evidence)
        return cls(
            finding_id=finding_id(rule.rule_id, evidence),
            rule_id=rule.rule_id,
            cwe=rule.cwe,
            severity=rule.severity,
            source=source,
            evidence=evidence,
            location=location,
            first_seen_iteration=iteration,
        )

    def transition(self, status: Status) -> Finding:
        if (self.status, status) not in ALLOWED_TRANSITIONS:
            raise InvalidTransition(f"{self.status.value} -> {status.value} is not allowed")
        return replace(self, status=status)

    def to_dict(self) -> dict[str, Any]:
        return {
            "finding-id": self.finding_id,
            "rule-id": self.rule_id,
            "cwe": {"id": self.cwe.id, "name": self.cwe.name, "category": self.cwe.category.value},
            "severity": self.severity.label,
            "source": self.source.value,
            "evidence": self.evidence,
            "location": None if self.location is None else {"file": self.location[0], "line": self.location[1]},
            "first-seen-iteration": self.first_seen_iteration,
            "status": self.status.value,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Finding:
        loc = d.get("location")
        cwe = d["cwe"]
        return cls(
            finding_id=d["finding-id"],
            rule_id=d["rule-id"],
            cwe=CweClass(cwe["id"], cwe["name"], Category(cwe["category"])),
            severity=Severity.parse(d["severity"]),
            source=Source(d["source"]),
            evidence=d["evidence"],
            location=None if loc is None else (loc["file"], int(loc["line"])),
            first_seen_iteration=int(d["first-seen-iteration"]),
            status=Status(d["status"]),
        )


# -- loading ------------------------------------------------------------------


def bundled_threat_model_path() -> Path:
    return Path(str(resources.files("firmguard") / "data" / DEFAULT_THREAT_MODEL))


def load_threat_model(path: str | Path | None = None) -> ThreatModel:
    """Load and validate a rules file; ``None`` loads the bundled default."""
    path = Path(path) if path is not None else bundled_threat_model_path()
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ThreatModelError(f"{path}: cannot parse rules file: {exc}") from exc
    return threat_model_from_dict(doc, origin=str(path))


def threat_model_from_dict(doc: dict[str, Any], origin: str = "<memory>") -> ThreatModel:
    threats: list[Threat] = []
    for i, entry in enumerate(doc.get("threats", [])):
        try:
            cwe_id = int(entry["cwe"])
            category = Category(entry.get("category", FIXED_CATEGORIES.get(cwe_id, Category.OTHER).value))
            cwe = CweClass(cwe_id, str(entry["name"]), category)
            threats.append(Threat(cwe, str(entry.get("description", "")), str(entry.get("mitigation", ""))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ThreatModelError(f"{origin}: threats[{i}]: {exc}") from None
    cwes = {t.cwe.id: t.cwe for t in threats}

    rules: list[SecurityRule] = []
    for i, entry in enumerate(doc.get("rules", [])):
        rid = entry.get("id", f"rules[{i}]")
        try:
            cwe_id = int(entry["cwe"])
            if cwe_id not in cwes:
                raise ThreatModelError(f"{origin}: rule {rid!r} references unknown CWE-{cwe_id}")
            sev = entry.get("severity")
            rules.append(
                SecurityRule(
                    rule_id=str(entry["id"]),
                    cwe=cwes[cwe_id],
                    detector=Detector(entry["detector"]),
                    pattern=str(entry.get("pattern", "")),
                    severity=Severity.parse(sev) if sev else DEFAULT_SEVERITY.get(cwe_id, Severity.MEDIUM),
                    enabled=bool(entry.get("enabled", True)),
                )
            )
        except ThreatModelError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ThreatModelError(f"{origin}: rule {rid!r}: {exc}") from None
    try:
        return ThreatModel(tuple(threats), tuple(rules))
    except ThreatModelError as exc:
        raise ThreatModelError(f"{origin}: {exc}") from None


# -- classification -----------------------------------------------------------


def classify_finding(
    evidence: str,
    source: Source | str,
    model: ThreatModel,
    *,
    detectors: tuple[Detector, ...] = (Detector.LOG_PATTERN,),
    location: tuple[str, int] | None = None,
    iteration: int = 0,
) -> Finding | None:
    """First enabled rule (file order) whose pattern matches wins; ``None`` otherwise."""
    if not evidence:
        raise ValueError("evidence must be non-empty")
    source = Source(source)
    for rule in model.rules:
        if rule.enabled and rule.detector in detectors and rule.matches(evidence):
            return Finding.create(rule, evidence, source, location=location, iteration=iteration)
    return None


def diff_findings(
    previous: list[Finding], current: list[Finding]
) -> tuple[list[Finding], list[Finding], list[Finding]]:
    """Partition by finding-id into ``(fixed, new, persisting)``.

    Order follows the input lists; ``persisting`` carries the previous objects.
    """
    prev_ids = {f.finding_id for f in previous}
    cur_ids = {f.finding_id for f in current}
    fixed = _unique(f for f in previous if f.finding_id not in cur_ids)
    persisting = _unique(f for f in previous if f.finding_id in cur_ids)
    new = _unique(f for f in current if f.finding_id not in prev_ids)
    return fixed, new, persisting


def _unique(items) -> list[Finding]:
    seen: set[str] = set()
    out = []
    for f in items:
        if f.finding_id not in seen:
            seen.add(f.finding_id)
            out.append(f)
    return out


def dedupe(findings) -> list[Finding]:
    """Collapse findings sharing an id, keeping the first occurrence."""
    return _unique(findings)


# -- iteration record ---------------------------------------------------------


@dataclass
class IterationRecord:
    """One generate -> build -> test -> analyze -> refine pass.

    ``patches`` are the proposals applied at the end of this iteration, so the
    next iteration's ``firmware_ref`` differs exactly when ``patches`` changed
    at least one byte.
    """

    index: int
    firmware_ref: str
    findings: list[Finding] = field(default_factory=list)
    timing: TimingReport | None = None
    metrics: MetricsSnapshot | None = None
    patches: list[PatchProposal] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    token_cost: int = 0
    build: BuildResult | None = None
    verdicts: list[AgentVerdict] = field(default_factory=list)
    uncategorized: list[AnalyzerRecord] = field(default_factory=list)
    coverage: dict[str, float] = field(default_factory=dict)
    executed_rules: list[str] = field(default_factory=list)
    exit_statuses: dict[str, int] = field(default_factory=dict)
    backend_cursor: int = 0

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("iteration index must be non-negative")
        if self.wall_clock_seconds < 0 or self.token_cost < 0:
            raise ValueError("resource counters must be non-negative")

    @property
    def rejected_ids(self) -> set[str]:
        return {v.subject for v in self.verdicts if v.agent.value == "threat" and v.verdict.value == "reject"}

    def actionable(self) -> list[Finding]:
        """Findings still demanding work: open or regressed, not rejected by triage."""
        rejected = self.rejected_ids
        return [
            f
            for f in self.findings
            if f.status in (Status.OPEN, Status.REGRESSED) and f.finding_id not in rejected
        ]

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration-index": self.index,
            "firmware-ref": self.firmware_ref,
            "build": None if self.build is None else self.build.to_dict(),
            "findings": [f.to_dict() for f in self.findings],
            "uncategorized": [r.to_dict() for r in self.uncategorized],
            "timing": None if self.timing is None else self.timing.to_dict(),
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "verdicts": [v.to_dict() for v in self.verdicts],
            "patches": [p.to_dict() for p in self.patches],
            "coverage": dict(sorted(self.coverage.items())),
            "executed-rules": list(self.executed_rules),
            "exit-statuses": dict(sorted(self.exit_statuses.items())),
            "wall-clock-seconds": self.wall_clock_seconds,
            "token-cost": self.token_cost,
            "backend-cursor": self.backend_cursor,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> IterationRecord:
        from firmguard.agents import AgentVerdict
        from firmguard.analyzers import AnalyzerRecord
        from firmguard.harness import BuildResult
        from firmguard.llm import PatchProposal
        from firmguard.metrics import MetricsSnapshot
        from firmguard.timing import TimingReport

        return cls(
            index=int(d["iteration-index"]),
            firmware_ref=d["firmware-ref"],
            build=None if d.get("build") is None else BuildResult.from_dict(d["build"]),
            findings=[Finding.from_dict(f) for f in d.get("findings", [])],
            uncategorized=[AnalyzerRecord.from_dict(r) for r in d.get("uncategorized", [])],
            timing=None if d.get("timing") is None else TimingReport.from_dict(d["timing"]),
            metrics=None if d.get("metrics") is None else MetricsSnapshot.from_dict(d["metrics"]),
            verdicts=[AgentVerdict.from_dict(v) for v in d.get("verdicts", [])],
            patches=[PatchProposal.from_dict(p) for p in d.get("patches", [])],
            coverage=dict(d.get("coverage", {})),
            executed_rules=list(d.get("executed-rules", [])),
            exit_statuses=dict(d.get("exit-statuses", {})),
            wall_clock_seconds=float(d.get("wall-clock-seconds", 0.0)),
            token_cost=int(d.get("token-cost", 0)),
            backend_cursor=int(d.get("backend-cursor", 0)),
        )


# -- source trees -------------------------------------------------------------


class PathEscape(ValueError):
    """A relative path would resolve outside the firmware source tree."""


def safe_relpath(path: str) -> str:
    """Normalize a tree-relative POSIX path, rejecting escapes and absolute paths."""
    p = PurePosixPath(path.replace("\\", "/"))
    if p.is_absolute() or not p.parts:
        raise PathEscape(f"{path!r} is not a relative path")
    parts: list[str] = []
    for part in p.parts:
        if part in ("", "."):
            continue
        if part == "..":
            if not parts:
                raise PathEscape(f"{path!r} escapes the source tree")
            parts.pop()
        else:
            parts.append(part)
    if not parts:
        raise PathEscape(f"{path!r} does not name a file")
    return "/".join(parts)


@dataclass(frozen=True)
class SourceTree:
    """Immutable set of (relative path, file text) pairs."""

    files: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        paths = [p for p, _ in self.files]
        if len(set(paths)) != len(paths):
            raise ValueError("duplicate paths in source tree")

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> SourceTree:
        return cls(tuple(sorted((safe_relpath(k), v) for k, v in mapping.items())))

    @classmethod
    def from_dir(cls, root: str | Path) -> SourceTree:
        root = Path(root)
        files = {
            p.relative_to(root).as_posix(): p.read_text(encoding="utf-8")
            for p in sorted(root.rglob("*"))
            if p.is_file()
        }
        return cls.from_mapping(files)

    def as_dict(self) -> dict[str, str]:
        return dict(self.files)

    def paths(self) -> list[str]:
        return [p for p, _ in self.files]

    def get(self, path: str) -> str | None:
        return self.as_dict().get(path)

    def __len__(self) -> int:
        return len(self.files)

    def digest(self) -> str:
        h = hashlib.sha256()
        for path, text in self.files:
            data = text.encode("utf-8")
            h.update(path.encode("utf-8") + b"\x00" + str(len(data)).encode() + b"\x00" + data)
        return h.hexdigest()

    def materialize(self, root: str | Path) -> Path:
        root = Path(root)
        for path, text in self.files:
            target = root / path
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(text, encoding="utf-8")
        return root
