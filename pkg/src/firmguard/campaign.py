"""Campaign orchestration: the generate -> build -> test -> agents -> metrics -> refine loop.

On-disk layout of ``<root>/<name>/``::

    state.json              status, iteration index, active source digest
    config.toml             the config file as given (config.json: resolved)
    task-spec.md, threat_model.toml, prompts/
    triage.json             manual status decisions (optional)
    iterations/<k>/         source/ logs/ findings.json metrics.json patches/ record.json
    corpus/<k>/<trial>/     <n>.bin inputs and outcome.json
    work/                   build scratch (not exported)

Every iteration is written completely before ``state.json`` points at it, so a
killed campaign resumes from its last complete iteration.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable

import filelock
import jsonschema

from firmguard import agents as ag
from firmguard import analyzers, fuzz, llm, timing
from firmguard.harness import HarnessError, TargetConfig, TargetHarness
from firmguard.metrics import (
    ComparisonArtifacts,
    MetricsConfig,
    export_comparison,
    snapshot,
    summarize_campaign,
)
from firmguard.metrics import tested as tested_record
from firmguard.model import (
    Detector,
    Finding,
    IterationRecord,
    Severity,
    Source,
    SourceTree,
    Status,
    ThreatModel,
    bundled_threat_model_path,
    dedupe,
    load_threat_model,
    tomllib,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
VOLATILE_KEYS = frozenset({"wall-clock-seconds", "duration-ms", "record-sha256"})
AGENT_NAMES = ("threat", "performance", "compliance")
VARIANTS = {
    "llm-only": frozenset(),
    "detection": frozenset({"threat"}),
    "optimization": frozenset({"performance"}),
    "verification": frozenset({"compliance"}),
    "all-agents": frozenset(AGENT_NAMES),
}
DISPLAY_NAMES = {
    frozenset(): "LLM Only",
    frozenset({"threat"}): "Detection Agent",
    frozenset({"performance"}): "Optimization Agent",
    frozenset({"compliance"}): "Verification Agent",
    frozenset(AGENT_NAMES): "All Agents",
}


class CampaignError(RuntimeError):
    pass


class IntegrityError(CampaignError):
    pass


class ConfoundError(CampaignError):
    """Comparison variants differ in more than their enabled agents."""


class CampaignStatus(str, Enum):
    RUNNING = "running"
    CONVERGED = "converged"
    BUDGET_EXHAUSTED = "budget-exhausted"
    NEEDS_HUMAN = "needs-human"
    FAILED = "failed"


EXIT_CODES = {
    CampaignStatus.CONVERGED: 0,
    CampaignStatus.FAILED: 1,
    CampaignStatus.BUDGET_EXHAUSTED: 2,
    CampaignStatus.NEEDS_HUMAN: 3,
    CampaignStatus.RUNNING: 1,
}


# -- serialization helpers ------------------------------------------------------


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False) + "\n"


def strip_volatile(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: strip_volatile(v) for k, v in obj.items() if k not in VOLATILE_KEYS}
    if isinstance(obj, list):
        return [strip_volatile(v) for v in obj]
    return obj


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _sha256(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def findings_schema() -> dict[str, Any]:
    return json.loads((resources.files("firmguard") / "data" / "findings.schema.json").read_text(encoding="utf-8"))


def findings_document(record: IterationRecord) -> dict[str, Any]:
    return {
        "schema-version": SCHEMA_VERSION,
        "iteration-index": record.index,
        "firmware-ref": record.firmware_ref,
        "rejected": sorted(record.rejected_ids),
        "findings": [f.to_dict() for f in record.findings],
    }


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class StaticAnalysis:
    format: analyzers.ReportFormat
    command: str | None = None
    replay: Path | None = None
    replay_root: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": self.format.value,
            "command": self.command,
            "replay": None if self.replay is None else str(self.replay),
            "replay-root": self.replay_root,
        }


@dataclass(frozen=True)
class CampaignConfig:
    name: str
    task_spec: Path
    target: TargetConfig
    fuzz: fuzz.FuzzPlan
    seed: int
    threat_model: Path | None = None
    agents_enabled: frozenset[str] = frozenset(AGENT_NAMES)
    max_iterations: int = 5
    severity_threshold: Severity = Severity.LOW
    max_stagnant_iterations: int = 3
    max_build_failures: int = 3
    metrics: MetricsConfig = MetricsConfig()
    advisory: ag.AdvisoryThresholds = ag.AdvisoryThresholds()
    declared_tasks: tuple[str, ...] = ()
    primary_file: str = "main.c"
    llm_backend: str = "mock"
    mock_script: Path | None = None
    agents_use_llm: bool = False
    static: StaticAnalysis | None = None
    ground_truth: Path | None = None
    workers: int | None = None
    source_file: Path | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "agents_enabled", frozenset(self.agents_enabled))
        unknown = self.agents_enabled - set(AGENT_NAMES)
        if unknown:
            raise ValueError(f"unknown agents: {', '.join(sorted(unknown))}")
        if self.max_iterations < 1:
            raise ValueError("max-iterations must be at least 1")
        if self.max_stagnant_iterations < 1 or self.max_build_failures < 1:
            raise ValueError("escalation limits must be positive")
        if self.llm_backend not in ("mock", "http"):
            raise ValueError(f"unknown llm backend {self.llm_backend!r}")
        if self.llm_backend == "mock" and self.mock_script is None:
            raise ValueError("the mock backend needs llm.script")
        if not self.name or "/" in self.name or self.name.startswith("."):
            raise ValueError(f"invalid campaign name {self.name!r}")

    @classmethod
    def load(cls, path: str | Path) -> CampaignConfig:
        path = Path(path).resolve()
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
        cfg = cls.from_dict(doc, path.parent)
        return dataclasses.replace(cfg, source_file=path)

    @classmethod
    def from_dict(cls, doc: dict[str, Any], base: Path) -> CampaignConfig:
        def rel(p: str | None) -> Path | None:
            return None if p is None else (base / p).resolve()

        seed = int(doc["seed"])
        fuzz_doc = dict(doc.get("fuzz", {}))
        if "seed" in fuzz_doc and int(fuzz_doc["seed"]) != seed:
            raise ValueError("fuzz.seed must equal the campaign seed")
        fuzz_doc["seed"] = seed
        conv = doc.get("convergence", {})
        budgets = doc.get("budgets", {})
        adv = doc.get("advisory", {})
        met = doc.get("metrics", {})
        llm_doc = doc.get("llm", {})
        static = None
        if "static-analysis" in doc:
            sa = doc["static-analysis"]
            static = StaticAnalysis(
                analyzers.ReportFormat(sa["format"]), sa.get("command"), rel(sa.get("replay")), sa.get("replay-root")
            )
        return cls(
            name=doc["name"],
            task_spec=rel(doc["task-spec"]),
            threat_model=rel(doc.get("threat-model")),
            target=TargetConfig.from_dict(doc.get("target", {})),
            fuzz=fuzz.FuzzPlan.from_dict(fuzz_doc),
            seed=seed,
            agents_enabled=frozenset(doc.get("agents-enabled", AGENT_NAMES)),
            max_iterations=int(doc.get("max-iterations", 5)),
            severity_threshold=Severity.parse(conv.get("no-open-findings-above", "low")),
            max_stagnant_iterations=int(conv.get("max-stagnant-iterations", 3)),
            max_build_failures=int(conv.get("max-build-failures", 3)),
            metrics=MetricsConfig(
                weights=tuple(float(w) for w in met.get("weights", (1.0, 1.0, 1.0))),
                wcet_budget_ms=float(budgets.get("wcet-ms", 10.0)),
                jitter_budget_us=float(budgets.get("jitter-us", 1000.0)),
                wall_weight=float(met.get("wall-weight", 1.0 / 3600.0)),
                token_weight=float(met.get("token-weight", 1e-6)),
            ),
            advisory=ag.AdvisoryThresholds(float(adv.get("wcet-ms", 10.0)), float(adv.get("jitter-us", 200.0))),
            declared_tasks=tuple(doc.get("declared-tasks", ())),
            primary_file=doc.get("primary-file", "main.c"),
            llm_backend=llm_doc.get("backend", "mock"),
            mock_script=rel(llm_doc.get("script")),
            agents_use_llm=bool(llm_doc.get("agents-use-llm", False)),
            static=static,
            ground_truth=rel(doc.get("ground-truth")),
            workers=doc.get("workers"),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "task-spec": str(self.task_spec),
            "threat-model": None if self.threat_model is None else str(self.threat_model),
            "target": self.target.to_dict(),
            "fuzz": self.fuzz.to_dict(),
            "seed": self.seed,
            "agents-enabled": sorted(self.agents_enabled),
            "max-iterations": self.max_iterations,
            "convergence": {
                "no-open-findings-above": self.severity_threshold.label,
                "max-stagnant-iterations": self.max_stagnant_iterations,
                "max-build-failures": self.max_build_failures,
            },
            "budgets": {"wcet-ms": self.metrics.wcet_budget_ms, "jitter-us": self.metrics.jitter_budget_us},
            "advisory": {"wcet-ms": self.advisory.wcet_ms, "jitter-us": self.advisory.jitter_us},
            "metrics": {
                "weights": list(self.metrics.weights),
                "wall-weight": self.metrics.wall_weight,
                "token-weight": self.metrics.token_weight,
            },
            "declared-tasks": list(self.declared_tasks),
            "primary-file": self.primary_file,
            "llm": {
                "backend": self.llm_backend,
                "script": None if self.mock_script is None else str(self.mock_script),
                "agents-use-llm": self.agents_use_llm,
            },
            "static-analysis": None if self.static is None else self.static.to_dict(),
            "ground-truth": None if self.ground_truth is None else str(self.ground_truth),
            "workers": self.workers,
        }

    def identity(self) -> dict[str, Any]:
        """Everything that must match between comparison variants."""
        d = self.to_dict()
        d.pop("name")
        d.pop("agents-enabled")
        d.pop("workers")
        return d

    def variant(self, agents: Iterable[str], name: str | None = None) -> CampaignConfig:
        agents = frozenset(agents)
        return dataclasses.replace(self, agents_enabled=agents, name=name or f"{self.name}-{variant_slug(agents)}")


def variant_slug(agents: frozenset[str]) -> str:
    for slug, members in VARIANTS.items():
        if members == agents:
            return slug
    return "+".join(sorted(agents))


def display_name(agents: frozenset[str]) -> str:
    return DISPLAY_NAMES.get(frozenset(agents), "Agents: " + " + ".join(sorted(agents)))


def make_backend(config: CampaignConfig, cursor: int = 0) -> llm.Backend:
    if config.llm_backend == "mock":
        return llm.MockBackend(config.mock_script, cursor=cursor)
    return llm.HttpBackend.from_env()


# -- state ----------------------------------------------------------------------


@dataclass
class CampaignState:
    name: str
    root: Path
    status: CampaignStatus = CampaignStatus.RUNNING
    seed: int = 0
    config_digest: str = ""
    active_source: str | None = None
    iterations: list[IterationRecord] = field(default_factory=list)
    diagnostic: str | None = None
    escalated_at: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema-version": SCHEMA_VERSION,
            "name": self.name,
            "status": self.status.value,
            "seed": self.seed,
            "config-digest": self.config_digest,
            "active-source": self.active_source,
            "iterations": [
                {"index": r.index, "record-sha256": _sha256(canonical_json(r.to_dict()))} for r in self.iterations
            ],
            "diagnostic": self.diagnostic,
            "escalated-at": list(self.escalated_at),
        }

    def digest(self) -> str:
        """Content digest of the campaign, ignoring wall-clock measurements."""
        doc = {"state": self.to_dict(), "records": [r.to_dict() for r in self.iterations]}
        return _sha256(canonical_json(strip_volatile(doc)))

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]


def iteration_dir(root: Path, k: int) -> Path:
    return root / "iterations" / str(k)


def load_state(campaign_dir: str | Path) -> CampaignState:
    root = Path(campaign_dir)
    try:
        doc = json.loads((root / "state.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise IntegrityError(f"{root}: no state.json") from None
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{root}/state.json is corrupt: {exc}") from None
    try:
        state = CampaignState(
            name=doc["name"],
            root=root,
            status=CampaignStatus(doc["status"]),
            seed=int(doc["seed"]),
            config_digest=doc["config-digest"],
            active_source=doc.get("active-source"),
            diagnostic=doc.get("diagnostic"),
            escalated_at=list(doc.get("escalated-at", [])),
        )
        entries = doc["iterations"]
    except (KeyError, ValueError, TypeError) as exc:
        raise IntegrityError(f"{root}/state.json is corrupt: {exc}") from None
    for expected, entry in enumerate(entries):
        if entry["index"] != expected:
            raise IntegrityError(f"iteration indices are not gapless at {entry['index']}")
        path = iteration_dir(root, expected) / "record.json"
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise IntegrityError(f"missing iteration file {path}") from None
        if _sha256(text) != entry["record-sha256"]:
            raise IntegrityError(f"{path} does not match its digest in state.json")
        state.iterations.append(IterationRecord.from_dict(json.loads(text)))
    return state


# -- the loop -------------------------------------------------------------------


@dataclass
class _Context:
    config: CampaignConfig
    root: Path
    model: ThreatModel
    prompts: dict[str, str]
    backend: llm.Backend
    harness: TargetHarness
    ground_truth: dict[str, bool] | None


def _prepare_dir(config: CampaignConfig, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    if config.source_file is not None:
        shutil.copyfile(config.source_file, root / "config.toml")
    (root / "config.json").write_text(canonical_json(config.to_dict()), encoding="utf-8")
    shutil.copyfile(config.task_spec, root / "task-spec.md")
    model_src = config.threat_model or bundled_threat_model_path()
    shutil.copyfile(model_src, root / "threat_model.toml")
    prompts = root / "prompts"
    prompts.mkdir(exist_ok=True)
    for name, text in llm.load_prompts().items():
        (prompts / name).write_text(text, encoding="utf-8")


def _config_digest(config: CampaignConfig) -> str:
    return _sha256(canonical_json(config.to_dict()))


def _context(config: CampaignConfig, root: Path, backend: llm.Backend | None, cursor: int) -> _Context:
    model = load_threat_model(root / "threat_model.toml")
    truth = ag.load_ground_truth(config.ground_truth) if config.ground_truth else None
    return _Context(
        config,
        root,
        model,
        llm.load_prompts(root / "prompts"),
        backend or make_backend(config, cursor),
        TargetHarness(config.target, root / "work"),
        truth,
    )


def run_campaign(
    config: CampaignConfig,
    campaign_root: str | Path,
    *,
    backend: llm.Backend | None = None,
    on_iteration: Callable[[CampaignState, IterationRecord], None] | None = None,
) -> CampaignState:
    """Run a fresh campaign in ``<campaign_root>/<config.name>``."""
    root = Path(campaign_root) / config.name
    if (root / "state.json").exists():
        raise CampaignError(f"{root} already holds a campaign; use resume")
    root.mkdir(parents=True, exist_ok=True)
    with filelock.FileLock(str(root / ".lock"), timeout=0):
        _prepare_dir(config, root)
        ctx = _context(config, root, backend, 0)
        state = CampaignState(config.name, root, seed=config.seed, config_digest=_config_digest(config))
        return _drive(ctx, state, on_iteration)


def resume(
    campaign_dir: str | Path,
    *,
    backend: llm.Backend | None = None,
    on_iteration: Callable[[CampaignState, IterationRecord], None] | None = None,
) -> CampaignState:
    root = Path(campaign_dir)
    with filelock.FileLock(str(root / ".lock"), timeout=0):
        try:
            state = load_state(root)
        except IntegrityError as exc:
            log.error("%s", exc)
            failed = CampaignState(root.name, root, CampaignStatus.FAILED, diagnostic=f"integrity error: {exc}")
            return failed
        if state.status not in (CampaignStatus.RUNNING, CampaignStatus.NEEDS_HUMAN):
            log.info("campaign %s is %s; nothing to resume", state.name, state.status.value)
            return state
        config = load_campaign_config(root)
        if _config_digest(config) != state.config_digest:
            state.status = CampaignStatus.FAILED
            state.diagnostic = "integrity error: config.json does not match the campaign's config digest"
            return state
        if state.status is CampaignStatus.NEEDS_HUMAN:
            state.escalated_at.append(len(state.iterations))
            state.status = CampaignStatus.RUNNING
            state.diagnostic = None
        cursor = state.iterations[-1].backend_cursor if state.iterations else 0
        ctx = _context(config, root, backend, cursor)
        return _drive(ctx, state, on_iteration)


def load_campaign_config(campaign_dir: str | Path) -> CampaignConfig:
    """The resolved config a campaign directory was started with."""
    root = Path(campaign_dir)
    doc = json.loads((root / "config.json").read_text(encoding="utf-8"))
    return CampaignConfig.from_dict(_drop_none(doc), root)


def _drop_none(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    return obj


def _save(state: CampaignState) -> None:
    _write_atomic(state.root / "state.json", canonical_json(state.to_dict()))


def _tree_for_next(state: CampaignState) -> SourceTree | None:
    if not state.iterations:
        return None
    last = state.iterations[-1]
    tree = SourceTree.from_dir(iteration_dir(state.root, last.index) / "source")
    tree = llm.apply_patches(tree, last.patches)
    if state.active_source is not None and tree.digest() != state.active_source:
        raise IntegrityError("reconstructed source does not match the recorded active-source digest")
    return tree


def _drive(ctx: _Context, state: CampaignState, on_iteration) -> CampaignState:
    cfg = ctx.config
    backend = ctx.backend
    try:
        tree = _tree_for_next(state)
        state.status = CampaignStatus.RUNNING
        _save(state)
        pending_tokens = 0
        pending_wall = 0.0
        if tree is None:
            t0 = time.monotonic()
            before = backend.tokens_used
            tree = llm.generate_firmware(
                (ctx.root / "task-spec.md").read_text(encoding="utf-8"),
                ctx.model,
                backend,
                prompts=ctx.prompts,
                primary_file=cfg.primary_file,
                seed=cfg.seed,
            )
            pending_tokens = backend.tokens_used - before
            pending_wall = time.monotonic() - t0
            state.active_source = tree.digest()
        while state.status is CampaignStatus.RUNNING:
            record = _iterate(ctx, state, tree, pending_wall, pending_tokens)
            pending_tokens, pending_wall = 0, 0.0
            state.iterations.append(record)
            if record.patches:
                tree = llm.apply_patches(tree, record.patches)
            state.active_source = tree.digest()
            _save(state)
            if on_iteration is not None:
                on_iteration(state, record)
    except (llm.GatewayError, HarnessError, analyzers.AdapterError, analyzers.AnalyzerMissing, OSError, IntegrityError) as exc:
        log.error("campaign %s failed: %s", state.name, exc)
        state.status = CampaignStatus.FAILED
        state.diagnostic = f"{type(exc).__name__}: {exc}"
        _save(state)
    return state


def _triage(root: Path) -> dict[str, dict[str, Any]]:
    path = root / "triage.json"
    if not path.exists():
        return {}
    return {e["finding-id"]: e for e in json.loads(path.read_text(encoding="utf-8"))}


def _lifecycle(found: list[Finding], state: CampaignState, triage: dict[str, dict[str, Any]]) -> list[Finding]:
    """Assign first-seen iteration and status from the campaign's history.

    A finding absent from the last tested iteration but seen earlier was
    fixed and has regressed. Triage decisions apply from the next iteration
    on: accepted-risk sticks, and a finding marked fixed by hand that shows up
    again has regressed.
    """
    k = len(state.iterations)
    history = [r for r in state.iterations if tested_record(r)]
    first_seen: dict[str, int] = {}
    for r in history:
        for f in r.findings:
            first_seen.setdefault(f.finding_id, f.first_seen_iteration)
    last = {f.finding_id: f for f in history[-1].findings} if history else {}
    out = []
    for f in found:
        if f.finding_id in last:
            status = last[f.finding_id].status
        elif f.finding_id in first_seen:
            status = Status.REGRESSED
        else:
            status = Status.OPEN
        manual = triage.get(f.finding_id)
        if manual is not None and manual["iteration"] < k:
            status = Status.ACCEPTED_RISK if manual["status"] == Status.ACCEPTED_RISK.value else Status.REGRESSED
        out.append(dataclasses.replace(f, first_seen_iteration=first_seen.get(f.finding_id, k), status=status))
    return out


def _test(ctx: _Context, k: int, tree: SourceTree, artifact: Path, logs: Path) -> dict[str, Any]:
    cfg = ctx.config
    model = ctx.model
    found: list[Finding] = []
    coverage = {"fuzz": 0.0, "static": 0.0, "dynamic": 0.0}
    executed: set[str] = set()
    exits: dict[str, int] = {}

    if cfg.target.stdin_injectable:
        outcomes, coverage["fuzz"] = fuzz.run_campaign(
            cfg.fuzz, artifact, ctx.harness, model, iteration=k, corpus_dir=ctx.root / "corpus" / str(k), workers=cfg.workers
        )
        fuzz_logs = logs / "fuzz"
        fuzz_logs.mkdir(parents=True, exist_ok=True)
        for o in outcomes:
            (fuzz_logs / f"{o.trial_index}.log").write_text(o.run.combined_log, encoding="utf-8")
            kind = o.run.exit_status.kind.value
            exits[kind] = exits.get(kind, 0) + 1
        found.extend(fuzz.campaign_findings(outcomes))
        executed.update(fuzz.executed_rule_ids(model))
    else:
        log.warning("target does not accept injected inputs; fuzzing skipped")

    uncategorized = []
    if cfg.static is not None:
        sa = cfg.static
        report = analyzers.run_analyzer(tree, sa.command, sa.format, replay=sa.replay, replay_root=sa.replay_root)
        mapped = analyzers.map_to_findings(
            report.records, model, analyzed_files=report.analyzed_files, sources=analyzers.source_files(tree), iteration=k
        )
        (logs / "static.json").write_text(canonical_json([r.to_dict() for r in report.records]), encoding="utf-8")
        found.extend(mapped.findings)
        uncategorized = mapped.uncategorized
        coverage["static"] = mapped.static_coverage
        executed.update(r.rule_id for r in model.enabled(Detector.ANALYZER_MESSAGE))

    nominal = ctx.harness.run(artifact, [])
    (logs / "runtime.log").write_text(nominal.combined_log, encoding="utf-8")
    found.extend(
        dataclasses.replace(f, source=Source.RUNTIME_MONITOR)
        for f in fuzz.scan_logs(nominal, model, k, cfg.target.freeze_silence_ms)
    )
    samples = timing.parse_timing_log(nominal.stdout)
    report_t = timing.compute_report(samples)
    t_findings, coverage["dynamic"] = timing.timing_findings(report_t, model, cfg.declared_tasks, k)
    found.extend(t_findings)
    executed.update(fuzz.executed_rule_ids(model))
    if report_t.tasks:
        executed.update(r.rule_id for r in model.enabled(Detector.TIMING_THRESHOLD))
    return {
        "findings": dedupe(found),
        "timing": report_t,
        "coverage": coverage,
        "executed": sorted(executed),
        "exits": exits,
        "uncategorized": uncategorized,
    }


def _converged(record: IterationRecord, cfg: CampaignConfig) -> bool:
    if record.build is not None and not record.build.success:
        return False
    if any(f.severity >= cfg.severity_threshold for f in record.actionable()):
        return False
    if record.timing is not None and record.timing.deadline_misses:
        return False
    if "compliance" in cfg.agents_enabled and not ag.compliance_passed(record.verdicts):
        return False
    return True


def _escalation(state: CampaignState, record: IterationRecord, cfg: CampaignConfig) -> str | None:
    since = max(state.escalated_at, default=0)
    window = [r for r in state.iterations if r.index >= since] + [record]
    failures = 0
    for r in reversed(window):
        if r.build is not None and not r.build.success:
            failures += 1
        else:
            break
    if failures >= cfg.max_build_failures:
        return f"{failures} consecutive build failures"
    tested = [r for r in window if tested_record(r)]
    n = cfg.max_stagnant_iterations
    if n >= 2 and len(tested) >= n:
        sets = [frozenset(f.finding_id for f in r.actionable()) for r in tested[-n:]]
        if sets[0] and all(s == sets[0] for s in sets):
            return f"actionable findings unchanged for {n} iterations"
    return None


def _iterate(ctx: _Context, state: CampaignState, tree: SourceTree, extra_wall: float, extra_tokens: int) -> IterationRecord:
    cfg = ctx.config
    k = len(state.iterations)
    t0 = time.monotonic()
    tokens0 = ctx.backend.tokens_used
    idir = iteration_dir(ctx.root, k)
    if idir.exists():
        # Leftovers of an iteration that never reached state.json.
        shutil.rmtree(idir)
    corpus = ctx.root / "corpus" / str(k)
    if corpus.exists():
        shutil.rmtree(corpus)
    logs = idir / "logs"
    logs.mkdir(parents=True)
    tree.materialize(idir / "source")

    build = ctx.harness.build(tree)
    (logs / "build.log").write_text(build.compiler_log, encoding="utf-8")
    record = IterationRecord(k, tree.digest(), build=dataclasses.replace(build, artifact=None))
    applied: list[llm.PatchProposal] = []
    if state.iterations and tested_record(state.iterations[-1]):
        # Patches answering a failed build trace to its compiler log, not to findings.
        applied = state.iterations[-1].patches
    previous_tested = next((r for r in reversed(state.iterations) if tested_record(r)), None)

    if build.success:
        result = _test(ctx, k, tree, build.artifact, logs)
        record.findings = _lifecycle(result["findings"], state, _triage(ctx.root))
        record.timing = result["timing"] if result["timing"].tasks else None
        record.coverage = result["coverage"]
        record.executed_rules = result["executed"]
        record.exit_statuses = result["exits"]
        record.uncategorized = result["uncategorized"]

        agent_backend = ctx.backend if cfg.agents_use_llm else None
        with concurrent.futures.ThreadPoolExecutor(max_workers=2) as pool:
            threat = (
                pool.submit(
                    ag.threat_agent_review, record.findings, tree, agent_backend,
                    model=ctx.model, exit_statuses=record.exit_statuses, prompts=ctx.prompts,
                )
                if "threat" in cfg.agents_enabled
                else None
            )
            perf = (
                pool.submit(
                    ag.performance_agent_review, record.timing, tree, agent_backend,
                    thresholds=cfg.advisory, prompts=ctx.prompts,
                )
                if "performance" in cfg.agents_enabled and record.timing is not None
                else None
            )
            record.verdicts = ag.merge_verdicts(threat.result() if threat else [], perf.result() if perf else [])
    if "compliance" in cfg.agents_enabled:
        # Compliance gates on the triaged record, so it runs after the other two.
        record.verdicts = ag.merge_verdicts(record.verdicts, ag.compliance_agent_check(record, ctx.model, applied))

    ada_value = confusion = None
    if ctx.ground_truth is not None and "threat" in cfg.agents_enabled:
        reviewed = {v.subject for v in record.verdicts if v.agent is ag.AgentKind.THREAT}
        labels = {fid: truth for fid, truth in ctx.ground_truth.items() if fid in reviewed}
        if labels:
            matrix, ada_value = ag.score_ada(record.verdicts, labels)
            confusion = matrix.to_dict()

    status = None
    diagnostic = None
    if _converged(record, cfg):
        status = CampaignStatus.CONVERGED
    else:
        diagnostic = _escalation(state, record, cfg)
        if diagnostic is not None:
            status = CampaignStatus.NEEDS_HUMAN
        elif k + 1 >= cfg.max_iterations:
            status = CampaignStatus.BUDGET_EXHAUSTED
            diagnostic = f"max-iterations ({cfg.max_iterations}) reached"

    if status is None:
        actionable = record.actionable()
        advisories = [v.annotation for v in record.verdicts if v.verdict is ag.Verdict.ADVISE]
        report = llm.VulnerabilityReport(
            actionable, None if build.success else build.compiler_log, advisories
        )
        try:
            proposals = llm.generate_patch(report, tree, ctx.backend, prompts=ctx.prompts, primary_file=cfg.primary_file, seed=cfg.seed)
            llm.apply_patches(tree, proposals)
        except (llm.RefusalError, llm.PatchConflict, llm.ExtractionError) as exc:
            status, diagnostic = CampaignStatus.NEEDS_HUMAN, f"patch generation: {exc}"
        except ValueError as exc:
            status, diagnostic = CampaignStatus.NEEDS_HUMAN, f"patch generation: {exc}"
        else:
            open_ids = report.ids
            record.patches = [
                dataclasses.replace(p, addresses=tuple(a for a in p.addresses if a in open_ids)) for p in proposals
            ]

    record.wall_clock_seconds = time.monotonic() - t0 + extra_wall
    record.token_cost = ctx.backend.tokens_used - tokens0 + extra_tokens
    record.backend_cursor = getattr(ctx.backend, "cursor", 0)
    record.metrics = snapshot(
        record, previous_tested if build.success else None, ctx.model, cfg.metrics, ada=ada_value, confusion=confusion
    )
    _persist_iteration(idir, record)
    if status is not None:
        state.status = status
        state.diagnostic = diagnostic
    return record


def _persist_iteration(idir: Path, record: IterationRecord) -> None:
    doc = findings_document(record)
    jsonschema.validate(doc, findings_schema())
    (idir / "findings.json").write_text(canonical_json(doc), encoding="utf-8")
    (idir / "metrics.json").write_text(canonical_json(record.metrics.to_dict()), encoding="utf-8")
    pdir = idir / "patches"
    pdir.mkdir(exist_ok=True)
    for n, p in enumerate(record.patches):
        (pdir / f"{n}.json").write_text(canonical_json(p.to_dict()), encoding="utf-8")
    (idir / "record.json").write_text(canonical_json(record.to_dict()), encoding="utf-8")


# -- triage ---------------------------------------------------------------------


def triage(campaign_dir: str | Path, finding_id: str, status: Status | str, note: str) -> dict[str, Any]:
    """Record a manual decision (accepted-risk or fixed) for an actionable finding."""
    root = Path(campaign_dir)
    status = Status(status)
    if status not in (Status.ACCEPTED_RISK, Status.FIXED):
        raise ValueError("triage can only mark findings accepted-risk or fixed")
    if not note.strip():
        raise ValueError("triage needs an explanatory note")
    with filelock.FileLock(str(root / ".lock"), timeout=0):
        state = load_state(root)
        if not state.iterations:
            raise CampaignError("campaign has no iterations")
        last = state.iterations[-1]
        match = next((f for f in last.findings if f.finding_id == finding_id), None)
        if match is None:
            raise CampaignError(f"finding {finding_id} is not in iteration {last.index}")
        match.transition(status)
        entries = list(_triage(root).values())
        entries = [e for e in entries if e["finding-id"] != finding_id]
        entry = {"finding-id": finding_id, "status": status.value, "note": note.strip(), "iteration": last.index}
        entries.append(entry)
        _write_atomic(root / "triage.json", canonical_json(sorted(entries, key=lambda e: e["finding-id"])))
        return entry


# -- export ---------------------------------------------------------------------


def export_dataset(state: CampaignState, out_dir: str | Path, *, force: bool = False) -> dict[str, Any]:
    """Write findings, logs, corpus, patches and metrics plus a digest manifest."""
    if not state.iterations:
        raise CampaignError("cannot export a campaign without iterations")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty (use force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    schema = findings_schema()
    src_root = state.root

    for r in state.iterations:
        idir = out / "iterations" / str(r.index)
        idir.mkdir(parents=True)
        doc = findings_document(r)
        jsonschema.validate(doc, schema)
        (idir / "findings.json").write_text(canonical_json(doc), encoding="utf-8")
        metrics = r.metrics.to_dict() if r.metrics else None
        (idir / "metrics.json").write_text(canonical_json(strip_volatile(metrics)), encoding="utf-8")
        pdir = idir / "patches"
        pdir.mkdir()
        for n, p in enumerate(r.patches):
            (pdir / f"{n}.json").write_text(canonical_json(p.to_dict()), encoding="utf-8")
        for sub in ("logs", "source"):
            src = iteration_dir(src_root, r.index) / sub
            if src.is_dir():
                shutil.copytree(src, idir / sub)
        corpus = src_root / "corpus" / str(r.index)
        if corpus.is_dir():
            shutil.copytree(corpus, out / "corpus" / str(r.index))
    shutil.copyfile(src_root / "threat_model.toml", out / "threat_model.toml")

    files = []
    for path in sorted(p for p in out.rglob("*") if p.is_file()):
        data = path.read_bytes()
        files.append({"path": path.relative_to(out).as_posix(), "sha256": _sha256(data), "bytes": len(data)})
    manifest = {
        "schema-version": SCHEMA_VERSION,
        "campaign": state.name,
        "status": state.status.value,
        "seed": state.seed,
        "config-digest": state.config_digest,
        "state-digest": state.digest(),
        "iterations": [
            {
                "index": r.index,
                "firmware-ref": r.firmware_ref,
                "findings": len(r.findings),
                "cwes": sorted({f.cwe.id for f in r.findings}),
            }
            for r in state.iterations
        ],
        "files": files,
    }
    (out / "manifest.json").write_text(canonical_json(manifest), encoding="utf-8")
    return manifest


# -- comparison -----------------------------------------------------------------


@dataclass
class Comparison:
    states: dict[str, CampaignState]
    artifacts: ComparisonArtifacts
    manifests: dict[str, dict[str, Any]]


def compare_configurations(
    configs: list[CampaignConfig],
    out_root: str | Path,
    *,
    backend_factory: Callable[[CampaignConfig], llm.Backend] | None = None,
) -> Comparison:
    """Run every variant under the same seed and task spec and tabulate them."""
    if len(configs) < 2:
        raise ValueError("comparison needs at least two variants")
    base = configs[0].identity()
    for c in configs[1:]:
        if c.identity() != base:
            diff = sorted(k for k in base if base[k] != c.identity().get(k))
            raise ConfoundError(f"variant {c.name} differs in {', '.join(diff)}, not only agents-enabled")
    labels = [display_name(c.agents_enabled) for c in configs]
    if len(set(labels)) != len(labels):
        raise ValueError("two variants enable the same agents")
    out_root = Path(out_root)
    states: dict[str, CampaignState] = {}
    manifests: dict[str, dict[str, Any]] = {}
    summaries = {}
    for label, c in zip(labels, configs):
        backend = backend_factory(c) if backend_factory else None
        state = run_campaign(c, out_root / "campaigns", backend=backend)
        model = load_threat_model(state.root / "threat_model.toml")
        states[label] = state
        summaries[label] = summarize_campaign(state.iterations, model, c.metrics)
        manifests[label] = export_dataset(state, out_root / "datasets" / c.name, force=True)
    artifacts = export_comparison(summaries)
    artifacts.write(out_root / "comparison")
    return Comparison(states, artifacts, manifests)
