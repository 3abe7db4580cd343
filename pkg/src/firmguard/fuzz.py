"""Seeded random-input fuzzing and log anomaly scanning.

Randomness comes from SplitMix64 (documented in ``docs/rng.md``) so corpora
are reproducible from ``(seed, trial-index)`` in any language.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

from firmguard.harness import ExitKind, RunResult, TargetHarness
from firmguard.model import Detector, Finding, Source, ThreatModel, classify_finding, dedupe

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Steele/Lea/Flood SplitMix64."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    @classmethod
    def for_trial(cls, seed: int, trial_index: int) -> SplitMix64:
        return cls(_mix64((seed + GOLDEN_GAMMA * (trial_index + 1)) & MASK64))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix64(self.state)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = MASK64 - (MASK64 + 1) % n
        while True:
            x = self.next_u64()
            if x <= limit:
                return x % n

    def randbytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += self.next_u64().to_bytes(8, "little")
        return bytes(out[:n])


class Generator(str, Enum):
    RANDOM_BYTES = "random-bytes"
    ASCII_GARBAGE = "ascii-garbage"
    BOUNDARY_LENGTHS = "boundary-lengths"
    MALFORMED_MQTT = "malformed-mqtt"
    FLOOD = "flood"


EXIT_CLASSES = (ExitKind.CLEAN, ExitKind.TIMEOUT, ExitKind.FREEZE, ExitKind.CRASH)
BOUNDARY_MARKER = b"+"
FLOOD_MAX_LEN = 16
DEFAULT_GENERATORS = (
    Generator.RANDOM_BYTES,
    Generator.ASCII_GARBAGE,
    Generator.BOUNDARY_LENGTHS,
    Generator.MALFORMED_MQTT,
)


@dataclass(frozen=True)
class FuzzPlan:
    seed: int
    trials: int
    inputs_per_trial: int = 8
    max_input_len: int = 64
    generators: tuple[Generator, ...] = DEFAULT_GENERATORS
    flood_rate_multiplier: float = 4.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "seed", int(self.seed) & MASK64)
        object.__setattr__(self, "generators", tuple(Generator(g) for g in self.generators))
        if self.trials < 1:
            raise ValueError("a fuzz plan needs at least one trial")
        if self.inputs_per_trial < 1 or self.max_input_len < 1:
            raise ValueError("inputs_per_trial and max_input_len must be positive")
        if not self.generators:
            raise ValueError("a fuzz plan needs at least one generator")
        if len(set(self.generators)) != len(self.generators):
            raise ValueError("duplicate generators")
        if self.flood_rate_multiplier <= 0:
            raise ValueError("flood_rate_multiplier must be positive")

    @property
    def dos_enabled(self) -> bool:
        return Generator.FLOOD in self.generators

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "trials": self.trials,
            "inputs-per-trial": self.inputs_per_trial,
            "max-input-len": self.max_input_len,
            "generators": [g.value for g in self.generators],
            "flood-rate-multiplier": self.flood_rate_multiplier,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FuzzPlan:
        return cls(
            seed=int(d["seed"]),
            trials=int(d["trials"]),
            inputs_per_trial=int(d.get("inputs-per-trial", 8)),
            max_input_len=int(d.get("max-input-len", 64)),
            generators=tuple(d.get("generators", DEFAULT_GENERATORS)),
            flood_rate_multiplier=float(d.get("flood-rate-multiplier", 4.0)),
        )


@dataclass(frozen=True)
class FuzzInput:
    data: bytes
    generator: Generator
    burst: bool = False


def _boundary(max_len: int, occurrence: int) -> bytes:
    cycle = (0, 1, max_len - 1, max_len, max_len + 1)
    n = cycle[occurrence % len(cycle)]
    if n > max_len:
        return b"A" * (max_len - 1) + BOUNDARY_MARKER
    return b"A" * max(n, 0)


def _mqtt(rng: SplitMix64, max_len: int) -> bytes:
    first = ((rng.below(14) + 1) << 4) | rng.below(16)
    if max_len < 2:
        return bytes([first])
    variant = rng.below(4)
    room = max_len - 1
    if variant == 0:
        length = b"\xff\xff\xff\xff\x7f"  # five-byte varint, never valid
    elif variant == 1:
        length = bytes([0x80 | rng.below(128), 0x80 | rng.below(128), 0x01])  # claims far more than sent
    elif variant == 2:
        length = b"\x00"  # claims empty, payload follows anyway
    else:
        length = bytes([0x80 | rng.below(128)])  # continuation bit with nothing after
    length = length[:room]
    room -= len(length)
    payload = rng.randbytes(rng.below(room + 1)) if room > 0 else b""
    return bytes([first]) + length + payload


def generate_trial(plan: FuzzPlan, trial_index: int) -> list[FuzzInput]:
    """Inputs for one trial; generators are assigned round-robin across the campaign."""
    if not 0 <= trial_index < plan.trials:
        raise IndexError(f"trial {trial_index} outside plan of {plan.trials}")
    rng = SplitMix64.for_trial(plan.seed, trial_index)
    gens = plan.generators
    out: list[FuzzInput] = []
    seen: dict[Generator, int] = {}
    for k in range(plan.inputs_per_trial):
        gen = gens[(trial_index * plan.inputs_per_trial + k) % len(gens)]
        occ = seen.get(gen, 0)
        seen[gen] = occ + 1
        if gen is Generator.RANDOM_BYTES:
            out.append(FuzzInput(rng.randbytes(rng.below(plan.max_input_len) + 1), gen))
        elif gen is Generator.ASCII_GARBAGE:
            n = rng.below(plan.max_input_len) + 1
            out.append(FuzzInput(bytes(0x20 + rng.below(95) for _ in range(n)), gen))
        elif gen is Generator.BOUNDARY_LENGTHS:
            out.append(FuzzInput(_boundary(plan.max_input_len, occ), gen))
        elif gen is Generator.MALFORMED_MQTT:
            out.append(FuzzInput(_mqtt(rng, plan.max_input_len), gen))
        else:
            m = plan.flood_rate_multiplier
            burst = math.floor((occ + 1) * m) - math.floor(occ * m)
            top = min(FLOOD_MAX_LEN, plan.max_input_len)
            for _ in range(burst):
                n = rng.below(top) + 1
                out.append(FuzzInput(bytes(0x20 + rng.below(95) for _ in range(n)), gen, burst=True))
    return out


def generate_inputs(plan: FuzzPlan, trial_index: int) -> list[bytes]:
    return [i.data for i in generate_trial(plan, trial_index)]


# -- log scanning ---------------------------------------------------------------


def scan_logs(run: RunResult, model: ThreatModel, iteration: int = 0, freeze_silence_ms: int | None = None) -> list[Finding]:
    """Classify every log line plus the exit status; duplicates collapse by id."""
    findings: list[Finding] = []
    for line in run.combined_log.splitlines():
        line = line.strip()
        if not line:
            continue
        f = classify_finding(line, Source.FUZZ, model, iteration=iteration)
        if f is not None:
            findings.append(f)
    status = run.exit_status
    if status.kind is ExitKind.CRASH:
        detail = f"signal {status.signal}" if status.signal else f"exit code {status.code}"
        for rule in model.enabled(Detector.CRASH):
            findings.append(Finding.create(rule, f"target crashed: {detail}", Source.FUZZ, iteration=iteration))
            break
    elif status.kind is ExitKind.FREEZE:
        silence = "?" if freeze_silence_ms is None else str(freeze_silence_ms)
        for rule in model.enabled(Detector.FREEZE):
            findings.append(Finding.create(rule, f"freeze after {silence} ms silence", Source.FUZZ, iteration=iteration))
            break
    return dedupe(findings)


def executed_rule_ids(model: ThreatModel) -> list[str]:
    return [r.rule_id for r in model.enabled(Detector.LOG_PATTERN, Detector.CRASH, Detector.FREEZE)]


# -- campaigns ----------------------------------------------------------------


@dataclass(frozen=True)
class TrialOutcome:
    trial_index: int
    inputs: tuple[FuzzInput, ...]
    run: RunResult
    findings: tuple[Finding, ...] = field(default=())

    def to_dict(self) -> dict[str, Any]:
        return {
            "trial-index": self.trial_index,
            "exit-status": str(self.run.exit_status),
            "inputs": [
                {
                    "file": f"{k}.bin",
                    "generator": inp.generator.value,
                    "burst": inp.burst,
                    "length": len(inp.data),
                    "sha256": hashlib.sha256(inp.data).hexdigest(),
                }
                for k, inp in enumerate(self.inputs)
            ],
            "finding-ids": [f.finding_id for f in self.findings],
        }


def fuzz_coverage(plan: FuzzPlan, outcomes: Iterable[TrialOutcome]) -> float:
    """Exercised (generator x exit-class) cells over the plan's full grid."""
    cells = set()
    for o in outcomes:
        for inp in o.inputs:
            cells.add((inp.generator, o.run.exit_status.kind))
    return len(cells) / (len(plan.generators) * len(EXIT_CLASSES))


def write_trial_corpus(outcome: TrialOutcome, trial_dir: Path) -> None:
    trial_dir.mkdir(parents=True, exist_ok=True)
    for k, inp in enumerate(outcome.inputs):
        (trial_dir / f"{k}.bin").write_bytes(inp.data)
    (trial_dir / "outcome.json").write_text(json.dumps(outcome.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_campaign(
    plan: FuzzPlan,
    artifact: Path,
    harness: TargetHarness,
    model: ThreatModel,
    *,
    iteration: int = 0,
    corpus_dir: str | Path | None = None,
    workers: int | None = None,
) -> tuple[list[TrialOutcome], float]:
    """Run every trial of ``plan`` and return outcomes sorted by trial index plus C_f.

    Harness errors (launch failure, sandbox violation) abort the campaign;
    target crashes and hangs are ordinary outcomes.
    """
    interval = harness.config.input_interval_ms

    def one(trial: int) -> TrialOutcome:
        inputs = generate_trial(plan, trial)
        pauses = [0.0 if i.burst else float(interval) for i in inputs]
        result = harness.run(artifact, [i.data for i in inputs], pauses)
        found = scan_logs(result, model, iteration, harness.config.freeze_silence_ms)
        return TrialOutcome(trial, tuple(inputs), result, tuple(found))

    workers = workers or os.cpu_count() or 1
    outcomes: list[TrialOutcome] = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(one, t) for t in range(plan.trials)]
        try:
            for fut in concurrent.futures.as_completed(futures):
                outcomes.append(fut.result())
        except BaseException:
            for f in futures:
                f.cancel()
            raise
    outcomes.sort(key=lambda o: o.trial_index)
    if corpus_dir is not None:
        root = Path(corpus_dir)
        for o in outcomes:
            write_trial_corpus(o, root / str(o.trial_index))
    return outcomes, fuzz_coverage(plan, outcomes)


def campaign_findings(outcomes: Iterable[TrialOutcome]) -> list[Finding]:
    """Campaign-wide finding list, collapsed by id in trial order."""
    return dedupe(f for o in outcomes for f in o.findings)
