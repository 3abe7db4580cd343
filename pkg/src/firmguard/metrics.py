"""Evaluation metrics over iteration records and comparison export.

Formulas:

* VRR  = 100 * fixed / total
* SCI  = (w1*Cf + w2*Cs + w3*Cd) / (w1 + w2 + w3)
* TMCS = 100 * mitigated / total_threats
* WCET = max t_i
* jitter = sqrt(sum((t_i - mean)^2) / n)  (timing.py)
* ADA  = (TP + TN) / (TP + TN + FP + FN)  (agents.py)
* IEI  = (dSecurity + dPerformance) / resources

The composition of the IEI terms is documented in docs/metrics.md.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from firmguard.model import IterationRecord, ThreatModel

TABLE_ORDER = ("LLM Only", "Detection Agent", "Optimization Agent", "Verification Agent", "All Agents")
METRIC_ROWS = (
    ("vrr", "VRR (%)"),
    ("sci", "SCI"),
    ("tmcs", "TMCS (%)"),
    ("wcet-ms", "WCET (ms)"),
    ("jitter-us", "Task Jitter (us)"),
    ("ada", "ADA (%)"),
    ("iei", "IEI"),
)
COST_METRICS = ("wcet-ms", "jitter-us")


# -- formulas -----------------------------------------------------------------


def vrr(fixed: int, total: int) -> float:
    """Percentage of vulnerabilities remediated; ``total == 0`` is a vacuous 100."""
    if fixed < 0 or total < 0:
        raise ValueError("counts must be non-negative")
    if fixed > total:
        raise ValueError(f"fixed ({fixed}) exceeds total ({total})")
    if total == 0:
        return 100.0
    return 100.0 * fixed / total


@dataclass(frozen=True)
class CoverageVector:
    c_fuzz: float
    c_static: float
    c_dynamic: float
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self) -> None:
        for name in ("c_fuzz", "c_static", "c_dynamic"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValueError("weights must be non-negative")
        if self.w1 + self.w2 + self.w3 <= 0:
            raise ValueError("weights must not all be zero")

    def to_dict(self) -> dict[str, Any]:
        return {
            "c-fuzz": self.c_fuzz,
            "c-static": self.c_static,
            "c-dynamic": self.c_dynamic,
            "weights": [self.w1, self.w2, self.w3],
        }


def sci(v: CoverageVector) -> float:
    return (v.w1 * v.c_fuzz + v.w2 * v.c_static + v.w3 * v.c_dynamic) / (v.w1 + v.w2 + v.w3)


def tmcs(mitigated: int, total_threats: int) -> float:
    if total_threats < 1:
        raise ValueError("threat model must be non-empty")
    if not 0 <= mitigated <= total_threats:
        raise ValueError(f"mitigated ({mitigated}) must be within [0, {total_threats}]")
    return 100.0 * mitigated / total_threats


def wcet(times: Iterable[float]) -> float:
    values = list(times)
    if not values:
        raise ValueError("WCET of an empty sample set")
    return max(values)


def jitter(times: Iterable[float]) -> float:
    """Population standard deviation, in the unit of ``times``."""
    values = list(times)
    if not values:
        raise ValueError("jitter of an empty sample set")
    mean = math.fsum(values) / len(values)
    return math.sqrt(math.fsum((t - mean) ** 2 for t in values) / len(values))


@dataclass(frozen=True)
class IterationDelta:
    delta_security: float
    delta_performance: float
    resources: float

    def __post_init__(self) -> None:
        if not self.resources > 0:
            raise ValueError("resources must be positive")


def iei(delta: IterationDelta) -> float:
    return (delta.delta_security + delta.delta_performance) / delta.resources


def security_score(vrr_pct: float, tmcs_pct: float) -> float:
    """Mean of VRR and TMCS, scaled to [0, 1]."""
    return (vrr_pct + tmcs_pct) / 200.0


def _clamp01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def performance_score(wcet_ms: float, jitter_us: float, wcet_budget_ms: float, jitter_budget_us: float) -> float:
    return ((1.0 - _clamp01(wcet_ms / wcet_budget_ms)) + (1.0 - _clamp01(jitter_us / jitter_budget_us))) / 2.0


@dataclass(frozen=True)
class MetricsConfig:
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    wcet_budget_ms: float = 10.0
    jitter_budget_us: float = 1000.0
    wall_weight: float = 1.0 / 3600.0
    token_weight: float = 1e-6

    def __post_init__(self) -> None:
        CoverageVector(0, 0, 0, *self.weights)
        if self.wcet_budget_ms <= 0 or self.jitter_budget_us <= 0:
            raise ValueError("budgets must be positive")
        if self.wall_weight < 0 or self.token_weight < 0:
            raise ValueError("resource weights must be non-negative")

    def resources(self, wall_seconds: float, tokens: int) -> float:
        return wall_seconds * self.wall_weight + tokens * self.token_weight


# -- snapshots ----------------------------------------------------------------


@dataclass
class MetricsSnapshot:
    vrr: float | None
    sci: float
    tmcs: float
    wcet_ms: float | None = None
    jitter_us: float | None = None
    ada: float | None = None
    iei: float | None = None
    markers: list[str] = field(default_factory=list)
    raw_inputs: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.vrr is not None and not 0.0 <= self.vrr <= 100.0:
            raise ValueError("vrr must be a percentage")
        if not 0.0 <= self.tmcs <= 100.0:
            raise ValueError("tmcs must be a percentage")
        if not 0.0 <= self.sci <= 1.0:
            raise ValueError("sci must be in [0, 1]")

    def value(self, metric: str) -> float | None:
        return {
            "vrr": self.vrr,
            "sci": self.sci,
            "tmcs": self.tmcs,
            "wcet-ms": self.wcet_ms,
            "jitter-us": self.jitter_us,
            "ada": self.ada,
            "iei": self.iei,
        }[metric]

    def to_dict(self) -> dict[str, Any]:
        return {
            "vrr": self.vrr,
            "sci": self.sci,
            "tmcs": self.tmcs,
            "wcet-ms": self.wcet_ms,
            "jitter-us": self.jitter_us,
            "ada": self.ada,
            "iei": self.iei,
            "markers": list(self.markers),
            "raw-inputs": self.raw_inputs,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> MetricsSnapshot:
        return cls(
            d["vrr"], d["sci"], d["tmcs"], d.get("wcet-ms"), d.get("jitter-us"), d.get("ada"), d.get("iei"),
            list(d.get("markers", [])), dict(d.get("raw-inputs", {})),
        )


def tested(record: IterationRecord) -> bool:
    """False for iterations whose firmware never built (nothing was exercised)."""
    return record.build is None or record.build.success


def mitigated_threats(record: IterationRecord, model: ThreatModel) -> list[int]:
    """CWE ids with no actionable finding whose detection rules ran this iteration."""
    open_cwes = {f.cwe.id for f in record.actionable()}
    executed = set(record.executed_rules)
    return [
        t.cwe.id
        for t in model.threats
        if t.cwe.id not in open_cwes and any(r.rule_id in executed for r in model.rules_for(t.cwe.id))
    ]


def _perf(record: IterationRecord, cfg: MetricsConfig) -> float | None:
    if record.timing is None or not record.timing.tasks:
        return None
    return performance_score(record.timing.wcet_ms, record.timing.jitter_us, cfg.wcet_budget_ms, cfg.jitter_budget_us)


def snapshot(
    record: IterationRecord,
    previous: IterationRecord | None,
    model: ThreatModel,
    config: MetricsConfig = MetricsConfig(),
    *,
    ada: float | None = None,
    confusion: dict[str, int] | None = None,
) -> MetricsSnapshot:
    """All metrics for ``record``; VRR and IEI compare against ``previous``.

    IEI charges the improvement to the resources recorded on ``previous``:
    that iteration's test cycle and the patch generated at its end.
    """
    markers: list[str] = []
    cov = record.coverage
    vector = CoverageVector(
        cov.get("fuzz", 0.0), cov.get("static", 0.0), cov.get("dynamic", 0.0), *config.weights
    )
    mitigated = mitigated_threats(record, model) if tested(record) else []
    tmcs_pct = tmcs(len(mitigated), len(model.threats))
    raw: dict[str, Any] = {
        "coverage": vector.to_dict(),
        "mitigated-cwes": mitigated,
        "threats": len(model.threats),
        "actionable": sorted(f.finding_id for f in record.actionable()),
        "wall-clock-seconds": record.wall_clock_seconds,
        "token-cost": record.token_cost,
    }
    if confusion is not None:
        raw["confusion"] = dict(confusion)

    vrr_pct: float | None = None
    if not tested(record):
        markers.append("untested")
    elif previous is None:
        markers.append("baseline")
    else:
        prev_ids = {f.finding_id for f in previous.actionable()}
        cur_ids = {f.finding_id for f in record.actionable()}
        fixed = len(prev_ids - cur_ids)
        vrr_pct = vrr(fixed, len(prev_ids))
        raw["fixed"], raw["total"] = fixed, len(prev_ids)
        if not prev_ids:
            markers.append("vacuous")

    wcet_ms = jitter_us = None
    if record.timing is not None and record.timing.tasks:
        wcet_ms, jitter_us = record.timing.wcet_ms, record.timing.jitter_us

    sec = security_score(vrr_pct or 0.0, tmcs_pct)
    perf = _perf(record, config)
    raw["security-score"], raw["performance-score"] = sec, perf

    iei_value = None
    if previous is not None and tested(record):
        prev_snapshot = previous.metrics
        prev_sec = prev_snapshot.raw_inputs.get("security-score", 0.0) if prev_snapshot else 0.0
        prev_perf = _perf(previous, config)
        d_perf = perf - prev_perf if perf is not None and prev_perf is not None else 0.0
        # The previous iteration's testing and the patch it requested are what
        # produced this iteration's firmware.
        resources = config.resources(previous.wall_clock_seconds, previous.token_cost)
        raw["delta"] = {"security": sec - prev_sec, "performance": d_perf, "resources": resources}
        if resources > 0:
            iei_value = iei(IterationDelta(sec - prev_sec, d_perf, resources))
        else:
            markers.append("no-resources")

    return MetricsSnapshot(vrr_pct, sci(vector), tmcs_pct, wcet_ms, jitter_us, ada, iei_value, markers, raw)


def summarize_campaign(
    records: list[IterationRecord], model: ThreatModel, config: MetricsConfig = MetricsConfig()
) -> MetricsSnapshot:
    """Campaign-level snapshot used for configuration comparison.

    VRR counts every distinct actionable finding ever identified and how many
    of them are no longer actionable at the end (a regressed finding counts
    once). SCI, TMCS, WCET and jitter come from the last tested iteration; ADA
    pools the confusion counts of all iterations; IEI is the total security and
    performance gain over the total resources spent.
    """
    if not records:
        raise ValueError("campaign has no iterations")
    tested_records = [r for r in records if tested(r)]
    last = tested_records[-1] if tested_records else records[-1]
    first = tested_records[0] if tested_records else records[0]
    ever = {f.finding_id for r in tested_records for f in r.actionable()}
    still = {f.finding_id for f in last.actionable()} if tested_records else set()
    fixed = len(ever - still)
    vrr_pct = vrr(fixed, len(ever))
    final = snapshot(last, None, model, config)
    markers = ["campaign"] + (["vacuous"] if not ever else [])

    pooled = {"tp": 0, "tn": 0, "fp": 0, "fn": 0}
    have_ada = False
    for r in records:
        conf = r.metrics.raw_inputs.get("confusion") if r.metrics else None
        if conf:
            have_ada = True
            for k in pooled:
                pooled[k] += conf[k]
    ada_value = None
    if have_ada and sum(pooled.values()):
        ada_value = (pooled["tp"] + pooled["tn"]) / sum(pooled.values())

    sec_end = security_score(vrr_pct, final.tmcs)
    base = snapshot(first, None, model, config)
    sec_start = security_score(0.0, base.tmcs)
    perf_end, perf_start = _perf(last, config), _perf(first, config)
    d_perf = perf_end - perf_start if perf_end is not None and perf_start is not None else 0.0
    resources = config.resources(sum(r.wall_clock_seconds for r in records), sum(r.token_cost for r in records))
    iei_value = iei(IterationDelta(sec_end - sec_start, d_perf, resources)) if resources > 0 else None

    raw = {
        "fixed": fixed,
        "total": len(ever),
        "iterations": len(records),
        "final-iteration": last.index,
        "coverage": final.raw_inputs["coverage"],
        "mitigated-cwes": final.raw_inputs["mitigated-cwes"],
        "threats": len(model.threats),
        "confusion": pooled if have_ada else None,
        "delta": {"security": sec_end - sec_start, "performance": d_perf, "resources": resources},
        "wall-clock-seconds": sum(r.wall_clock_seconds for r in records),
        "token-cost": sum(r.token_cost for r in records),
    }
    return MetricsSnapshot(vrr_pct, final.sci, final.tmcs, final.wcet_ms, final.jitter_us, ada_value, iei_value, markers, raw)


# -- comparison export ----------------------------------------------------------


@dataclass
class ComparisonArtifacts:
    columns: list[str]
    table: str
    radar: str
    legend: str
    report: str

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "table": out / "comparison.csv",
            "radar": out / "radar.tsv",
            "legend": out / "radar-legend.txt",
            "report": out / "comparison.json",
        }
        for key, path in paths.items():
            path.write_text(getattr(self, key), encoding="utf-8")
        return paths


def _ordered(names: Iterable[str]) -> list[str]:
    names = list(names)
    known = [n for n in TABLE_ORDER if n in names]
    return known + [n for n in names if n not in TABLE_ORDER]


def _display(metric: str, value: float | None) -> str:
    if value is None:
        return "N/A"
    if metric == "ada":
        value *= 100.0
    return f"{value:.6g}"


def _radar_axes(columns: list[str], snaps: Mapping[str, MetricsSnapshot]) -> list[list[float]]:
    """Rows per configuration, one [0, 1] value per metric, larger is better."""
    rows = [[math.nan] * len(METRIC_ROWS) for _ in columns]
    for j, (metric, _) in enumerate(METRIC_ROWS):
        values = [snaps[c].value(metric) for c in columns]
        present = [v for v in values if v is not None]
        for i, v in enumerate(values):
            if v is None:
                continue
            if metric in ("vrr", "tmcs"):
                rows[i][j] = v / 100.0
            elif metric in ("sci", "ada"):
                rows[i][j] = v
            elif metric in COST_METRICS:
                best = min(present)
                rows[i][j] = 1.0 if v <= 0 else best / v
            else:
                top = max(present)
                rows[i][j] = max(v / top, 0.0) if top > 0 else 0.0
    return rows


def export_comparison(snapshots: Mapping[str, MetricsSnapshot]) -> ComparisonArtifacts:
    if not snapshots:
        raise ValueError("need at least one snapshot")
    columns = _ordered(snapshots)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Metric"] + columns)
    for metric, label in METRIC_ROWS:
        writer.writerow([label] + [_display(metric, snapshots[c].value(metric)) for c in columns])

    rows = _radar_axes(columns, snapshots)
    radar = "".join("\t".join(repr(round(x, 12)) if not math.isnan(x) else "nan" for x in row) + "\n" for row in rows)
    legend = "".join(
        [f"axis {j}\t{metric}\t{'inverted' if metric in COST_METRICS else 'direct'}\n" for j, (metric, _) in enumerate(METRIC_ROWS)]
        + [f"row {i}\t{name}\n" for i, name in enumerate(columns)]
    )
    report = json.dumps(
        {"schema-version": 1, "columns": columns, "snapshots": {c: snapshots[c].to_dict() for c in columns}},
        indent=2,
        sort_keys=True,
    ) + "\n"
    return ComparisonArtifacts(columns, buf.getvalue(), radar, legend, report)
