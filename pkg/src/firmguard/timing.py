"""Timing-log parsing and per-task real-time metrics (WCET, jitter, misses).

Log grammar (bit-exact, see ``docs/timing-format.md``)::

    TICK task=<name> exec_ms=<real> deadline_ms=<real>
    MISSED DEADLINE task=<name> [exec_ms=<real>] [deadline_ms=<real>]

Anything else on a line is ignored, so timing lines may be interleaved with
arbitrary firmware output.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

from firmguard.model import Detector, Finding, Source, ThreatModel

log = logging.getLogger(__name__)

_NUM = r"([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?inf|nan|\S+)"
TICK_RE = re.compile(r"\bTICK task=(\S+) exec_ms=" + _NUM + r" deadline_ms=" + _NUM)
MISSED_RE = re.compile(r"\bMISSED DEADLINE task=(\S+)(.*)$")
_FIELD_RE = re.compile(r"\b(exec_ms|deadline_ms)=(\S+)")


@dataclass(frozen=True)
class TimingSample:
    task: str
    tick: int
    exec_ms: float | None
    deadline_ms: float | None
    missed: bool
    imputed: bool = False

    def __post_init__(self) -> None:
        if self.exec_ms is not None and self.exec_ms < 0:
            raise ValueError("exec_ms must be non-negative")
        if self.deadline_ms is not None and self.deadline_ms <= 0:
            raise ValueError("deadline_ms must be positive")
        if not self.imputed and self.exec_ms is not None and self.deadline_ms is not None:
            if self.missed != (self.exec_ms > self.deadline_ms):
                raise ValueError("missed must equal exec_ms > deadline_ms for measured samples")

    def to_line(self) -> str:
        if self.imputed:
            line = f"MISSED DEADLINE task={self.task}"
            if self.deadline_ms is not None:
                line += f" deadline_ms={self.deadline_ms!r}"
            return line
        return f"TICK task={self.task} exec_ms={self.exec_ms!r} deadline_ms={self.deadline_ms!r}"


@dataclass
class ParseResult:
    samples: list[TimingSample] = field(default_factory=list)
    warnings: int = 0


def _finite_nonneg(text: str) -> float | None:
    try:
        value = float(text)
    except ValueError:
        return None
    if not math.isfinite(value) or value < 0:
        return None
    return value


def parse_timing_log_detailed(log_text: str) -> ParseResult:
    """Parse timing lines, counting malformed numeric fields as warnings."""
    out = ParseResult()
    ticks: dict[str, int] = {}
    last_deadline: dict[str, float] = {}
    for line in log_text.splitlines():
        m = TICK_RE.search(line)
        if m:
            task = m.group(1)
            exec_ms = _finite_nonneg(m.group(2))
            deadline = _finite_nonneg(m.group(3))
            if exec_ms is None or not deadline:
                out.warnings += 1
                continue
            tick = ticks.get(task, 0)
            ticks[task] = tick + 1
            last_deadline[task] = deadline
            out.samples.append(TimingSample(task, tick, exec_ms, deadline, exec_ms > deadline))
            continue
        m = MISSED_RE.search(line)
        if m:
            task = m.group(1)
            fields = dict(_FIELD_RE.findall(m.group(2)))
            exec_ms = deadline = None
            bad = False
            if "exec_ms" in fields:
                exec_ms = _finite_nonneg(fields["exec_ms"])
                bad |= exec_ms is None
            if "deadline_ms" in fields:
                deadline = _finite_nonneg(fields["deadline_ms"])
                bad |= not deadline
            if bad:
                out.warnings += 1
                continue
            if deadline is None:
                deadline = last_deadline.get(task)
            tick = ticks.get(task, 0)
            ticks[task] = tick + 1
            if exec_ms is not None and deadline is not None and exec_ms > deadline:
                out.samples.append(TimingSample(task, tick, exec_ms, deadline, True))
            else:
                # Lower bound: the task ran at least until its deadline.
                imputed = deadline if exec_ms is None else max(exec_ms, deadline or 0.0)
                out.samples.append(TimingSample(task, tick, imputed, deadline, True, imputed=True))
    return out


def parse_timing_log(log_text: str) -> list[TimingSample]:
    result = parse_timing_log_detailed(log_text)
    if result.warnings:
        log.warning("skipped %d timing line(s) with malformed numbers", result.warnings)
    return result.samples


@dataclass(frozen=True)
class TaskStats:
    task: str
    samples: int
    wcet_ms: float
    mean_ms: float
    jitter_us: float
    deadline_misses: int
    imputed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "samples": self.samples,
            "wcet-ms": self.wcet_ms,
            "mean-exec-ms": self.mean_ms,
            "jitter-us": self.jitter_us,
            "deadline-miss-count": self.deadline_misses,
            "imputed": self.imputed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TaskStats:
        return cls(
            d["task"], int(d["samples"]), float(d["wcet-ms"]), float(d["mean-exec-ms"]),
            float(d["jitter-us"]), int(d["deadline-miss-count"]), int(d.get("imputed", 0)),
        )


@dataclass(frozen=True)
class TimingReport:
    tasks: dict[str, TaskStats]
    samples: tuple[TimingSample, ...] = ()

    @property
    def wcet_ms(self) -> float:
        """Worst task WCET; 0.0 for an empty report."""
        return max((t.wcet_ms for t in self.tasks.values()), default=0.0)

    @property
    def jitter_us(self) -> float:
        return max((t.jitter_us for t in self.tasks.values()), default=0.0)

    @property
    def deadline_misses(self) -> int:
        return sum(t.deadline_misses for t in self.tasks.values())

    def __bool__(self) -> bool:
        return bool(self.tasks)

    def to_log(self) -> str:
        return "".join(s.to_line() + "\n" for s in self.samples)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tasks": [self.tasks[k].to_dict() for k in sorted(self.tasks)],
            "wcet-ms": self.wcet_ms,
            "jitter-us": self.jitter_us,
            "deadline-misses": self.deadline_misses,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TimingReport:
        stats = [TaskStats.from_dict(t) for t in d.get("tasks", [])]
        return cls({s.task: s for s in stats})


def compute_report(samples: Iterable[TimingSample]) -> TimingReport:
    """Aggregate samples per task.

    WCET is the max execution time, jitter the population standard deviation
    ``sqrt(sum((t_i - mean)^2) / n)`` reported in microseconds.
    """
    samples = tuple(samples)
    by_task: dict[str, list[TimingSample]] = {}
    for s in samples:
        by_task.setdefault(s.task, []).append(s)
    tasks = {}
    for name in sorted(by_task):
        group = by_task[name]
        times = [s.exec_ms for s in group if s.exec_ms is not None]
        n = len(times)
        if n:
            mean = math.fsum(times) / n
            var = math.fsum((t - mean) ** 2 for t in times) / n
            jitter_ms = math.sqrt(var)
            wcet = max(times)
        else:
            mean = jitter_ms = wcet = 0.0
        tasks[name] = TaskStats(
            task=name,
            samples=len(group),
            wcet_ms=wcet,
            mean_ms=mean,
            jitter_us=jitter_ms * 1000.0,
            deadline_misses=sum(1 for s in group if s.missed),
            imputed=sum(1 for s in group if s.imputed),
        )
    return TimingReport(tasks, samples)


_METRIC_VALUE = {
    "wcet-ms": lambda t: t.wcet_ms,
    "jitter-us": lambda t: t.jitter_us,
    "deadline-misses": lambda t: float(t.deadline_misses),
}


def timing_findings(
    report: TimingReport,
    model: ThreatModel,
    declared_tasks: Iterable[str] = (),
    iteration: int = 0,
) -> tuple[list[Finding], float]:
    """Threshold-rule findings per (task, rule) plus declared-task sampling coverage.

    Evidence names the task and the breached threshold but not the observed
    value, so the same breach keeps the same finding-id across iterations.
    """
    findings = []
    for rule in model.enabled(Detector.TIMING_THRESHOLD):
        metric, limit = rule.threshold()
        for name in sorted(report.tasks):
            stats = report.tasks[name]
            if _METRIC_VALUE[metric](stats) > limit:
                evidence = f"task={name} breaches {metric}<={limit:g}"
                findings.append(Finding.create(rule, evidence, Source.RUNTIME_MONITOR, iteration=iteration))
    declared = list(dict.fromkeys(declared_tasks))
    if not declared:
        log.warning("no declared tasks; dynamic coverage reported as 0")
        return findings, 0.0
    sampled = sum(1 for t in declared if t in report.tasks and report.tasks[t].samples > 0)
    return findings, sampled / len(declared)
