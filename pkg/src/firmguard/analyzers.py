"""Static analyzer adapters: cppcheck XML v2, SARIF 2.1.0 and GCC-style text.

Each adapter works live (run the tool over a materialized source tree) or in
replay mode (parse a previously captured report). Both paths share the same
parser, so identical report bytes give identical findings.
"""

from __future__ import annotations

import json
import re
import shlex
import subprocess
import tempfile
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path, PurePosixPath
from typing import Any
from urllib.parse import unquote, urlparse

from firmguard.model import Detector, Finding, SourceTree, Source, ThreatModel

SOURCE_SUFFIXES = {".c", ".h", ".cc", ".cpp", ".hpp", ".s", ".S"}


class AdapterError(RuntimeError):
    """The analyzer produced output we could not parse."""

    def __init__(self, message: str, raw: str = ""):
        head = raw[:500]
        super().__init__(f"{message}; output starts with: {head!r}" if raw else message)
        self.raw_head = head


class AnalyzerMissing(RuntimeError):
    """The analyzer executable is not installed (and no replay file was given)."""


class ReportFormat(str, Enum):
    CPPCHECK_XML = "cppcheck-xml"
    CLANG_SARIF = "clang-sarif"
    GCC_TEXT = "generic-gcc-text"


@dataclass(frozen=True)
class AnalyzerRecord:
    tool: ReportFormat
    file: str
    line: int
    check_id: str
    message: str
    tool_severity: str

    def __post_init__(self) -> None:
        if self.line < 1:
            raise ValueError("line must be >= 1")
        if not self.message:
            raise ValueError("message must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "tool": self.tool.value,
            "file": self.file,
            "line": self.line,
            "check-id": self.check_id,
            "message": self.message,
            "tool-severity": self.tool_severity,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AnalyzerRecord:
        return cls(ReportFormat(d["tool"]), d["file"], int(d["line"]), d["check-id"], d["message"], d["tool-severity"])


@dataclass
class AnalyzerReport:
    records: list[AnalyzerRecord] = field(default_factory=list)
    analyzed_files: set[str] = field(default_factory=set)


def _relative(path: str, root: str | None) -> str:
    if path.startswith("file:"):
        path = unquote(urlparse(path).path)
    if root:
        root_p = PurePosixPath(root)
        p = PurePosixPath(path)
        try:
            return p.relative_to(root_p).as_posix()
        except ValueError:
            pass
    return path


# -- parsers ------------------------------------------------------------------


def parse_cppcheck_xml(text: str, root: str | None = None) -> AnalyzerReport:
    try:
        doc = ET.fromstring(text)
    except ET.ParseError as exc:
        raise AdapterError(f"not cppcheck XML: {exc}", text) from None
    if doc.tag != "results":
        raise AdapterError("not cppcheck XML: root element is not <results>", text)
    report = AnalyzerReport()
    errors = doc.find("errors")
    for err in [] if errors is None else errors.findall("error"):
        # First <location> is where cppcheck reports the defect.
        loc = err.find("location")
        if loc is None:
            continue
        path = _relative(loc.get("file", ""), root)
        msg = err.get("msg") or err.get("verbose") or err.get("id") or "(no message)"
        report.records.append(
            AnalyzerRecord(
                ReportFormat.CPPCHECK_XML,
                path,
                max(int(loc.get("line", "1") or 1), 1),
                err.get("id", ""),
                msg,
                err.get("severity", ""),
            )
        )
        report.analyzed_files.add(path)
    return report


def parse_sarif(text: str, root: str | None = None) -> AnalyzerReport:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AdapterError(f"not SARIF JSON: {exc}", text) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("runs"), list):
        raise AdapterError("not SARIF: missing runs array", text)
    report = AnalyzerReport()
    for run in doc["runs"]:
        artifacts = run.get("artifacts") or []
        uris = [_relative(a.get("location", {}).get("uri", ""), root) for a in artifacts]
        report.analyzed_files.update(u for u in uris if u)
        rules = (run.get("tool", {}).get("driver", {}) or {}).get("rules") or []
        for res in run.get("results") or []:
            check = res.get("ruleId")
            if check is None and "ruleIndex" in res and res["ruleIndex"] < len(rules):
                check = rules[res["ruleIndex"]].get("id")
            message = (res.get("message") or {}).get("text") or (res.get("message") or {}).get("id") or check or "(no message)"
            path, line = "<unknown>", 1
            locs = res.get("locations") or []
            if locs:
                phys = locs[0].get("physicalLocation") or {}
                art = phys.get("artifactLocation") or {}
                if "uri" in art:
                    path = _relative(art["uri"], root)
                elif "index" in art and art["index"] < len(uris):
                    path = uris[art["index"]]
                line = max(int((phys.get("region") or {}).get("startLine", 1)), 1)
            report.records.append(
                AnalyzerRecord(ReportFormat.CLANG_SARIF, path, line, check or "", message, res.get("level", "warning"))
            )
            if path != "<unknown>":
                report.analyzed_files.add(path)
    return report


GCC_LINE = re.compile(
    r"^(?P<file>[^\s:][^:]*):(?P<line>\d+):(?:(?P<col>\d+):)?\s*"
    r"(?P<sev>fatal error|error|warning):\s*(?P<msg>.*?)"
    r"(?:\s+\[(?P<id>[^\]\s]+)\])?\s*$"
)


def parse_gcc_text(text: str, root: str | None = None) -> AnalyzerReport:
    """``file:line[:col]: (warning|error): message [check]`` lines; notes are context, not records."""
    report = AnalyzerReport()
    for raw in text.splitlines():
        m = GCC_LINE.match(raw)
        if not m:
            continue
        path = _relative(m.group("file"), root)
        sev = m.group("sev")
        check = m.group("id") or f"gcc-{sev.replace(' ', '-')}"
        check = check.lstrip("-")
        report.records.append(
            AnalyzerRecord(ReportFormat.GCC_TEXT, path, max(int(m.group("line")), 1), check, m.group("msg") or sev, sev)
        )
        report.analyzed_files.add(path)
    return report


PARSERS = {
    ReportFormat.CPPCHECK_XML: parse_cppcheck_xml,
    ReportFormat.CLANG_SARIF: parse_sarif,
    ReportFormat.GCC_TEXT: parse_gcc_text,
}


def parse_report(text: str, fmt: ReportFormat | str, root: str | None = None) -> AnalyzerReport:
    return PARSERS[ReportFormat(fmt)](text, root)


# -- live and replay ------------------------------------------------------------


def source_files(tree: SourceTree) -> list[str]:
    return [p for p in tree.paths() if PurePosixPath(p).suffix in SOURCE_SUFFIXES]


def run_analyzer(
    tree: SourceTree,
    tool_command: str | None,
    fmt: ReportFormat | str,
    *,
    replay: str | Path | None = None,
    replay_root: str | None = None,
    timeout_s: float = 600.0,
) -> AnalyzerReport:
    """Run ``tool_command`` over ``tree`` or parse the ``replay`` report.

    The command is a template: ``{files}`` expands to the tree's C sources and
    ``{output}`` to a report path the tool writes. Without ``{output}`` the
    report is read from stdout, falling back to stderr (cppcheck writes its
    XML there).
    """
    fmt = ReportFormat(fmt)
    if replay is not None:
        return parse_report(Path(replay).read_text(encoding="utf-8"), fmt, replay_root)
    if not tool_command:
        raise ValueError("either tool_command or replay is required")
    files = source_files(tree)
    with tempfile.TemporaryDirectory(prefix="firmguard-sa-") as tmp:
        src = tree.materialize(Path(tmp) / "src")
        out_path = Path(tmp) / "report.out"
        argv: list[str] = []
        for tok in shlex.split(tool_command):
            if tok == "{files}":
                argv.extend(files)
            else:
                argv.append(tok.replace("{output}", str(out_path)))
        try:
            proc = subprocess.run(argv, cwd=src, capture_output=True, timeout=timeout_s)
        except FileNotFoundError as exc:
            raise AnalyzerMissing(f"analyzer not installed: {argv[0]}") from exc
        stdout = proc.stdout.decode("utf-8", errors="replace")
        stderr = proc.stderr.decode("utf-8", errors="replace")
        if "{output}" in tool_command:
            if not out_path.exists():
                raise AdapterError(f"{argv[0]} exited {proc.returncode} without writing a report", stdout + stderr)
            candidates = [out_path.read_text(encoding="utf-8", errors="replace")]
        else:
            candidates = [stdout, stderr] if fmt is not ReportFormat.GCC_TEXT else [stdout + "\n" + stderr]
        report = None
        last_error: AdapterError | None = None
        for text in candidates:
            if not text.strip():
                continue
            try:
                report = parse_report(text, fmt, str(src))
                break
            except AdapterError as exc:
                last_error = exc
        if report is None:
            if last_error is not None:
                raise last_error
            if fmt is ReportFormat.GCC_TEXT and proc.returncode == 0:
                report = AnalyzerReport()
            else:
                raise AdapterError(f"{argv[0]} exited {proc.returncode} with no report", stdout + stderr)
    if "{files}" in tool_command:
        report.analyzed_files |= set(files)
    return report


@dataclass
class MappedFindings:
    findings: list[Finding]
    static_coverage: float
    uncategorized: list[AnalyzerRecord]


def map_to_findings(
    records: list[AnalyzerRecord],
    model: ThreatModel,
    *,
    analyzed_files: set[str] | None = None,
    sources: list[str] | None = None,
    iteration: int = 0,
) -> MappedFindings:
    """Match records against analyzer-message rules (check-id first, then message).

    One finding per mapped record; everything else is returned as
    uncategorized, so ``len(findings) + len(uncategorized) == len(records)``.
    Static coverage is the share of ``sources`` the analyzer looked at.
    """
    rules = model.enabled(Detector.ANALYZER_MESSAGE)
    findings: list[Finding] = []
    leftover: list[AnalyzerRecord] = []
    for rec in records:
        rule = next((r for r in rules if r.matches(rec.check_id) or r.matches(rec.message)), None)
        if rule is None:
            leftover.append(rec)
            continue
        evidence = f"{rec.file}:{rec.line}: [{rec.check_id}] {rec.message}"
        findings.append(
            Finding.create(rule, evidence, Source.STATIC_ANALYSIS, location=(rec.file, rec.line), iteration=iteration)
        )
    analyzed = analyzed_files if analyzed_files is not None else {r.file for r in records}
    coverage = len(analyzed & set(sources)) / len(set(sources)) if sources else 0.0
    return MappedFindings(findings, coverage, leftover)
