"""Sandboxed build and execution of candidate firmware.

Two adapters share one contract. ``external-command`` wraps any build and
emulator invocation (for instance a QEMU + FreeRTOS image supplied by the
user); ``stub-target`` runs the bundled scenario interpreter in ``stub.py``.

Hangs are detected by an output-silence watchdog: after the startup grace
period, a target that neither writes output nor receives input for
``freeze_silence_ms`` is killed with status ``freeze-kill``.
"""

from __future__ import annotations

import functools
import logging
import os
import re
import shlex
import shutil
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from firmguard.model import SourceTree, tomllib

log = logging.getLogger(__name__)

REAPER_MARGIN_S = 2.0
DEFAULT_LOG_CAP = 16 * 1024 * 1024
STUB_MARKER = re.compile(r"^\s*//@stub\s+(.*?)\s*$")
STUB_SCRIPT = "firmware.stub"


class HarnessError(RuntimeError):
    pass


class CommandNotFound(HarnessError):
    """The build or run command does not exist (environment misconfiguration)."""


class LaunchError(HarnessError):
    pass


class SandboxViolation(HarnessError):
    """A target wrote outside its scratch directory."""


class Kind(str, Enum):
    EXTERNAL = "external-command"
    STUB = "stub-target"


class ExitKind(str, Enum):
    CLEAN = "clean-exit"
    TIMEOUT = "timeout-kill"
    FREEZE = "freeze-kill"
    CRASH = "crash"


class FailureClass(str, Enum):
    MISSING_CONTEXT = "missing-context"
    LOGICAL = "logical-inconsistency"
    UNCLASSIFIED = "unclassified"


@dataclass(frozen=True)
class TargetConfig:
    kind: Kind = Kind.STUB
    build_command: str = ""
    run_command: str = ""
    startup_grace_ms: int = 200
    run_timeout_ms: int = 10_000
    freeze_silence_ms: int = 2_000
    stdin_injectable: bool = True
    input_interval_ms: int = 20
    log_cap_bytes: int = DEFAULT_LOG_CAP
    build_timeout_ms: int = 300_000

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Kind(self.kind))
        for name in ("startup_grace_ms", "run_timeout_ms", "freeze_silence_ms", "log_cap_bytes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.input_interval_ms < 0:
            raise ValueError("input_interval_ms must be non-negative")
        if self.run_timeout_ms <= self.startup_grace_ms:
            raise ValueError("run_timeout_ms must exceed startup_grace_ms")
        if self.freeze_silence_ms >= self.run_timeout_ms:
            raise ValueError("freeze_silence_ms must be below run_timeout_ms")
        if self.kind is Kind.EXTERNAL and not (self.build_command and self.run_command):
            raise ValueError("external-command targets need build_command and run_command")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "build-command": self.build_command,
            "run-command": self.run_command,
            "startup-grace-ms": self.startup_grace_ms,
            "run-timeout-ms": self.run_timeout_ms,
            "freeze-silence-ms": self.freeze_silence_ms,
            "stdin-injectable": self.stdin_injectable,
            "input-interval-ms": self.input_interval_ms,
            "log-cap-bytes": self.log_cap_bytes,
            "build-timeout-ms": self.build_timeout_ms,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TargetConfig:
        return cls(**{k.replace("-", "_"): v for k, v in d.items()})


@dataclass(frozen=True)
class ExitStatus:
    kind: ExitKind
    code: int | None = None
    signal: str | None = None

    def __str__(self) -> str:
        if self.kind is ExitKind.CRASH:
            return f"crash({self.signal or self.code})"
        return self.kind.value


@dataclass(frozen=True)
class RunResult:
    exit_status: ExitStatus
    stdout: str
    stderr: str
    duration_ms: int
    injected_inputs: tuple[bytes, ...] = ()
    truncated: bool = False

    @property
    def combined_log(self) -> str:
        return self.stdout + ("\n" if self.stdout and not self.stdout.endswith("\n") else "") + self.stderr


@dataclass
class BuildResult:
    success: bool
    compiler_log: str
    failure_class: FailureClass | None = None
    source_digest: str = ""
    artifact: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.success != (self.failure_class is None):
            raise ValueError("failure_class is set exactly when the build failed")

    def to_dict(self) -> dict[str, Any]:
        return {
            "success": self.success,
            "compiler-log": self.compiler_log,
            "failure-class": None if self.failure_class is None else self.failure_class.value,
            "source-digest": self.source_digest,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> BuildResult:
        fc = d.get("failure-class")
        return cls(d["success"], d["compiler-log"], None if fc is None else FailureClass(fc), d.get("source-digest", ""))


# -- failure classification ---------------------------------------------------


@functools.lru_cache(maxsize=1)
def _failure_table() -> tuple[tuple[FailureClass, re.Pattern[str]], ...]:
    text = (resources.files("firmguard") / "data" / "build_failures.toml").read_text(encoding="utf-8")
    doc = tomllib.loads(text)
    return tuple((FailureClass(p["class"]), re.compile(p["pattern"])) for p in doc["patterns"])


def classify_build_failure(compiler_log: str) -> FailureClass:
    """Classify a failed build by the earliest diagnostic line the table recognizes."""
    if not compiler_log.strip():
        raise ValueError("compiler log must be non-empty")
    table = _failure_table()
    for line in compiler_log.splitlines():
        for cls, rx in table:
            if rx.search(line):
                return cls
    return FailureClass.UNCLASSIFIED


# -- harness ------------------------------------------------------------------


def stub_program() -> Path:
    return Path(str(resources.files("firmguard") / "stub.py"))


def extract_stub_script(tree: SourceTree) -> tuple[str, list[str]]:
    """Collect ``//@stub`` directives (sorted path order) into a scenario script.

    ``build-error <text>`` directives are pulled out as simulated compiler
    diagnostics instead.
    """
    lines: list[str] = []
    errors: list[str] = []
    for _path, text in tree.files:
        for raw in text.splitlines():
            m = STUB_MARKER.match(raw)
            if not m:
                continue
            directive = m.group(1)
            if directive.startswith("build-error "):
                errors.append(directive[len("build-error "):])
            else:
                lines.append(directive)
    return "".join(line + "\n" for line in lines), errors


class TargetHarness:
    """Builds and runs firmware under a sandbox root.

    Builds are memoized by source digest; concurrent runs get disjoint
    scratch directories under ``<root>/<digest>/runs``.
    """

    def __init__(self, config: TargetConfig, root: str | Path):
        self.config = config
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._builds: dict[str, BuildResult] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    # build -------------------------------------------------------------------

    def build(self, tree: SourceTree) -> BuildResult:
        digest = tree.digest()
        with self._guard:
            lock = self._locks.setdefault(digest, threading.Lock())
        with lock:
            cached = self._builds.get(digest)
            if cached is not None:
                return cached
            result = self._build(tree, digest)
            self._builds[digest] = result
            return result

    def _build(self, tree: SourceTree, digest: str) -> BuildResult:
        base = self.root / digest[:16]
        src = base / "src"
        src.mkdir(parents=True, exist_ok=True)
        tree.materialize(src)
        if self.config.kind is Kind.STUB:
            script, errors = extract_stub_script(tree)
            if errors:
                log_text = "".join(e + "\n" for e in errors)
                return BuildResult(False, log_text, classify_build_failure(log_text), digest)
            (src / STUB_SCRIPT).write_text(script, encoding="utf-8")
            return BuildResult(True, "stub scenario assembled\n", None, digest, artifact=src)

        argv = shlex.split(self.config.build_command)
        try:
            proc = subprocess.run(
                argv,
                cwd=src,
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
                timeout=self.config.build_timeout_ms / 1000.0,
            )
        except FileNotFoundError as exc:
            raise CommandNotFound(f"build command not found: {argv[0]}") from exc
        except subprocess.TimeoutExpired as exc:
            out = (exc.output or b"").decode("utf-8", errors="replace")
            text = out + f"\nbuild timed out after {self.config.build_timeout_ms} ms\n"
            return BuildResult(False, text, FailureClass.UNCLASSIFIED, digest)
        text = proc.stdout.decode("utf-8", errors="replace")
        if proc.returncode == 0:
            return BuildResult(True, text, None, digest, artifact=src)
        return BuildResult(False, text or f"exit status {proc.returncode}\n", classify_build_failure(text or "unknown failure"), digest)

    # run ---------------------------------------------------------------------

    def _argv(self, artifact: Path) -> list[str]:
        if self.config.kind is Kind.STUB:
            return [sys.executable, "-I", "-S", str(stub_program()), str(artifact / STUB_SCRIPT)]
        return shlex.split(self.config.run_command.replace("{artifact}", shlex.quote(str(artifact))))

    def run(
        self,
        artifact: Path,
        inputs: Sequence[bytes] = (),
        intervals_ms: Sequence[float] | None = None,
    ) -> RunResult:
        """Run the built artifact, feeding ``inputs`` (newline-terminated) on stdin.

        ``intervals_ms`` overrides the pause before each input; it defaults to
        ``input_interval_ms`` for every input.
        """
        cfg = self.config
        inputs = tuple(bytes(i) for i in inputs)
        if inputs and not cfg.stdin_injectable:
            raise ValueError("target does not accept injected inputs")
        if intervals_ms is None:
            intervals_ms = [cfg.input_interval_ms] * len(inputs)
        elif len(intervals_ms) != len(inputs):
            raise ValueError("intervals_ms must match inputs")

        base = artifact.parent
        runs = base / "runs"
        runs.mkdir(exist_ok=True)
        scratch = Path(tempfile.mkdtemp(prefix="run-", dir=runs))
        before = _snapshot(base, artifact)

        argv = self._argv(artifact)
        env = dict(os.environ, FIRMGUARD_ARTIFACT=str(artifact))
        try:
            proc = subprocess.Popen(
                argv,
                cwd=scratch,
                env=env,
                stdin=subprocess.PIPE if cfg.stdin_injectable else subprocess.DEVNULL,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                start_new_session=True,
            )
        except FileNotFoundError as exc:
            raise CommandNotFound(f"run command not found: {argv[0]}") from exc
        except OSError as exc:
            raise LaunchError(f"cannot launch {argv[0]}: {exc}") from exc

        try:
            result = _Supervisor(proc, cfg, inputs, intervals_ms).supervise()
        finally:
            shutil.rmtree(scratch, ignore_errors=True)
        after = _snapshot(base, artifact)
        escaped = sorted(after - before)
        if escaped:
            raise SandboxViolation(f"target wrote outside its scratch directory: {', '.join(escaped)}")
        return result


def _snapshot(base: Path, artifact: Path) -> set[str]:
    seen = {p.name for p in base.iterdir() if p.name != "runs"}
    runs = base / "runs"
    if runs.is_dir():
        seen |= {f"runs/{p.name}" for p in runs.iterdir() if not p.name.startswith("run-")}
    seen |= {f"artifact/{p.relative_to(artifact).as_posix()}" for p in artifact.rglob("*")}
    return seen


class _Supervisor:
    """Pumps I/O for one target process and enforces timeout and freeze rules."""

    POLL_S = 0.005

    def __init__(self, proc: subprocess.Popen, cfg: TargetConfig, inputs: tuple[bytes, ...], intervals: Sequence[float]):
        self.proc = proc
        self.cfg = cfg
        self.inputs = inputs
        self.intervals = list(intervals)
        self.start = time.monotonic()
        self.last_activity = self.start
        self.lock = threading.Lock()
        self.captured = {"stdout": bytearray(), "stderr": bytearray()}
        self.truncated = False
        self.total = 0

    def _touch(self) -> None:
        with self.lock:
            self.last_activity = time.monotonic()

    def _reader(self, name: str, stream) -> None:
        fd = stream.fileno()
        buf = self.captured[name]
        while True:
            try:
                chunk = os.read(fd, 65536)
            except OSError:
                break
            if not chunk:
                break
            self._touch()
            with self.lock:
                room = self.cfg.log_cap_bytes - self.total
                if room <= 0:
                    self.truncated = True
                    continue
                if len(chunk) > room:
                    chunk = chunk[:room]
                    self.truncated = True
                buf.extend(chunk)
                self.total += len(chunk)

    def _writer(self) -> None:
        stdin = self.proc.stdin
        try:
            for data, pause in zip(self.inputs, self.intervals):
                if pause > 0:
                    time.sleep(pause / 1000.0)
                if self.proc.poll() is not None:
                    break
                stdin.write(data + b"\n")
                stdin.flush()
                self._touch()
        except (BrokenPipeError, OSError, ValueError):
            pass
        finally:
            try:
                stdin.close()
            except (BrokenPipeError, OSError):
                pass

    def _kill(self) -> None:
        try:
            os.killpg(self.proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        except PermissionError:  # pragma: no cover - pgid reused by another user
            self.proc.kill()

    def supervise(self) -> RunResult:
        cfg = self.cfg
        threads = [
            threading.Thread(target=self._reader, args=("stdout", self.proc.stdout), daemon=True),
            threading.Thread(target=self._reader, args=("stderr", self.proc.stderr), daemon=True),
        ]
        if self.proc.stdin is not None:
            threads.append(threading.Thread(target=self._writer, daemon=True))
        for t in threads:
            t.start()

        grace_end = self.start + cfg.startup_grace_ms / 1000.0
        deadline = self.start + cfg.run_timeout_ms / 1000.0
        silence = cfg.freeze_silence_ms / 1000.0
        killed: ExitKind | None = None
        while self.proc.poll() is None:
            now = time.monotonic()
            if now >= deadline:
                killed = ExitKind.TIMEOUT
            else:
                with self.lock:
                    quiet_since = max(self.last_activity, grace_end)
                if now >= grace_end and now - quiet_since >= silence:
                    killed = ExitKind.FREEZE
            if killed is not None:
                self._kill()
                break
            time.sleep(self.POLL_S)

        try:
            self.proc.wait(timeout=REAPER_MARGIN_S)
        except subprocess.TimeoutExpired:  # pragma: no cover - SIGKILL is not ignorable
            self.proc.kill()
            self.proc.wait()
        duration_ms = int(round((time.monotonic() - self.start) * 1000))
        for t in threads:
            t.join(timeout=REAPER_MARGIN_S / 2)
        # Grandchildren that escaped the process group may keep pipes open.
        for stream in (self.proc.stdout, self.proc.stderr):
            try:
                stream.close()
            except OSError:
                pass

        rc = self.proc.returncode
        if killed is not None:
            status = ExitStatus(killed)
        elif rc == 0:
            status = ExitStatus(ExitKind.CLEAN, 0)
        elif rc < 0:
            status = ExitStatus(ExitKind.CRASH, rc, signal.Signals(-rc).name)
        else:
            status = ExitStatus(ExitKind.CRASH, rc)

        with self.lock:
            out = bytes(self.captured["stdout"])
            err = bytes(self.captured["stderr"])
            truncated = self.truncated
        stdout = out.decode("utf-8", errors="replace")
        stderr = err.decode("utf-8", errors="replace")
        if truncated:
            stderr += f"\n[firmguard: log truncated at {cfg.log_cap_bytes} bytes]\n"
        return RunResult(status, stdout, stderr, duration_ms, self.inputs, truncated)


def build(tree: SourceTree, config: TargetConfig, root: str | Path) -> BuildResult:
    return TargetHarness(config, root).build(tree)


def run(
    artifact: Path,
    config: TargetConfig,
    inputs: Sequence[bytes] = (),
    root: str | Path | None = None,
) -> RunResult:
    return TargetHarness(config, root or artifact.parent.parent).run(artifact, inputs)
