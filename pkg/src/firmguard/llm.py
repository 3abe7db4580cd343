"""LLM gateway: firmware generation, patch generation and patch application.

Backends implement a single ``complete(request) -> Completion`` call. Two
ship here: ``HttpBackend`` for chat-completion endpoints and ``MockBackend``
which replays scripted responses so whole campaigns run offline.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

from firmguard.model import Finding, SourceTree, ThreatModel, safe_relpath

log = logging.getLogger(__name__)

ENV_URL = "FIRMGUARD_LLM_URL"
ENV_KEY = "FIRMGUARD_LLM_API_KEY"
ENV_MODEL = "FIRMGUARD_LLM_MODEL"

FIRMWARE_TEMPERATURE = 0.7
PATCH_TEMPERATURE = 0.2
TRANSPORT_ATTEMPTS = 3
REFUSAL_ATTEMPTS = 2
CODE_ONLY_INSTRUCTION = "\n\nReturn only code: fenced code blocks with `// file:` markers and no prose."

PROMPT_FILES = (
    "generate_firmware.system.txt",
    "generate_firmware.user.txt",
    "generate_patch.system.txt",
    "generate_patch.user.txt",
    "threat_review.system.txt",
    "threat_review.user.txt",
)


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    """The backend could not be reached or answered with a server error."""


class ExtractionError(GatewayError):
    """The response did not contain usable fenced code blocks."""


class RefusalError(ExtractionError):
    """The backend answered in prose only; retried with a code-only instruction."""


class PatchConflict(GatewayError):
    pass


class Role(str, Enum):
    GENERATE_FIRMWARE = "generate-firmware"
    GENERATE_PATCH = "generate-patch"
    REVIEW = "review"


class Proposer(str, Enum):
    LLM = "llm"
    THREAT = "threat-agent"
    PERFORMANCE = "performance-agent"
    COMPLIANCE = "compliance-agent"


@dataclass(frozen=True)
class GenerationRequest:
    role: Role
    system_prompt: str
    user_prompt: str
    temperature: float = FIRMWARE_TEMPERATURE
    max_output_tokens: int = 4096
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("prompts must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be in [0, 2]")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    def digest(self) -> str:
        return hashlib.sha256((self.system_prompt + "\n\n" + self.user_prompt).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Completion:
    text: str
    tokens: int = 0


class Backend(Protocol):
    tokens_used: int

    def complete(self, request: GenerationRequest) -> Completion: ...


# -- backends -----------------------------------------------------------------


class TokenBucket:
    """Serialized token bucket; ``acquire`` blocks until a token is available."""

    def __init__(self, rate_per_s: float, capacity: int = 1, clock: Callable[[], float] = time.monotonic):
        self.rate = rate_per_s
        self.capacity = capacity
        self.tokens = float(capacity)
        self.clock = clock
        self.stamp = clock()
        self.lock = threading.Lock()

    def acquire(self) -> None:
        with self.lock:
            while True:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
                self.stamp = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                time.sleep((1 - self.tokens) / self.rate)


class HttpBackend:
    """Chat-completions endpoint (``POST {url}`` with ``messages``)."""

    def __init__(self, url: str, api_key: str = "", model: str = "gpt-4", *, requests_per_s: float = 1.0, timeout_s: float = 120.0, client=None):
        import httpx

        self.url = url
        self.model = model
        self.headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = client or httpx.Client(timeout=timeout_s)
        self.bucket = TokenBucket(requests_per_s)
        self.tokens_used = 0
        self._lock = threading.Lock()

    @classmethod
    def from_env(cls, **kwargs) -> HttpBackend:
        url = os.environ.get(ENV_URL)
        if not url:
            raise GatewayError(f"{ENV_URL} is not set")
        return cls(url, os.environ.get(ENV_KEY, ""), os.environ.get(ENV_MODEL, "gpt-4"), **kwargs)

    def complete(self, request: GenerationRequest) -> Completion:
        import httpx

        body: dict[str, Any] = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        self.bucket.acquire()
        try:
            resp = self.client.post(self.url, json=body, headers=self.headers)
        except httpx.HTTPError as exc:
            raise TransportError(f"{self.url}: {exc}") from exc
        if resp.status_code >= 400:
            raise TransportError(f"{self.url}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"{self.url}: malformed completion payload") from exc
        tokens = int((data.get("usage") or {}).get("total_tokens", 0))
        with self._lock:
            self.tokens_used += tokens
        return Completion(text, tokens)


class MockBackend:
    """Scripted backend for offline runs.

    ``by-digest/<sha256>.md`` answers the request whose rendered prompt hashes
    to that digest; anything else is served from ``playback/`` in sorted
    filename order. A playback file ending in ``.transport-error`` raises
    ``TransportError`` instead of answering. Token cost is estimated as one
    token per four characters of prompt plus response.
    """

    def __init__(self, script_dir: str | Path, cursor: int = 0):
        self.root = Path(script_dir)
        keyed = self.root / "by-digest"
        self.keyed = {p.stem: p for p in keyed.glob("*.md")} if keyed.is_dir() else {}
        playback = self.root / "playback"
        self.playback = sorted(p for p in playback.iterdir() if p.is_file()) if playback.is_dir() else []
        self.cursor = cursor
        self.tokens_used = 0
        self.requests: list[GenerationRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: GenerationRequest) -> Completion:
        with self._lock:
            self.requests.append(request)
            path = self.keyed.get(request.digest())
            if path is None:
                if self.cursor >= len(self.playback):
                    raise TransportError(f"mock script exhausted after {self.cursor} playback responses")
                path = self.playback[self.cursor]
                self.cursor += 1
            if path.name.endswith(".transport-error"):
                raise TransportError(f"scripted transport failure ({path.name})")
            text = path.read_text(encoding="utf-8")
            tokens = (len(request.system_prompt) + len(request.user_prompt) + len(text)) // 4
            self.tokens_used += tokens
            return Completion(text, tokens)


def complete_with_retry(
    backend: Backend,
    request: GenerationRequest,
    *,
    attempts: int = TRANSPORT_ATTEMPTS,
    backoff_s: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> Completion:
    """Retry transport errors with exponential backoff (``backoff_s * 2**k``)."""
    for k in range(attempts):
        try:
            return backend.complete(request)
        except TransportError as exc:
            if k == attempts - 1:
                raise
            log.warning("LLM transport error (attempt %d/%d): %s", k + 1, attempts, exc)
            sleep(backoff_s * (2**k))
    raise AssertionError("unreachable")


# -- prompts ------------------------------------------------------------------


_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


def load_prompts(directory: str | Path | None = None) -> dict[str, str]:
    if directory is None:
        base = resources.files("firmguard") / "prompts"
        return {name: (base / name).read_text(encoding="utf-8") for name in PROMPT_FILES}
    directory = Path(directory)
    return {name: (directory / name).read_text(encoding="utf-8") for name in PROMPT_FILES}


def render(template: str, **values: str) -> str:
    """Single-pass ``{placeholder}`` substitution; values may contain braces."""

    def sub(m: re.Match[str]) -> str:
        key = m.group(1)
        if key not in values:
            raise KeyError(f"prompt placeholder {{{key}}} has no value")
        return str(values[key])

    return _PLACEHOLDER.sub(sub, template)


def render_sources(tree: SourceTree) -> str:
    return "\n".join(f"```c\n// file: {path}\n{text.rstrip()}\n```\n" for path, text in tree.files)


def render_findings(findings: Iterable[Finding]) -> str:
    lines = []
    for f in findings:
        loc = f" at {f.location[0]}:{f.location[1]}" if f.location else ""
        lines.append(
            f"- finding {f.finding_id} [{f.cwe.label} {f.cwe.name}] severity={f.severity.label} source={f.source.value}{loc}\n"
            f"  evidence: {f.evidence}"
        )
    return "\n".join(lines)


# -- code extraction ----------------------------------------------------------


_FENCE = re.compile(r"^```[^\n`]*\n(.*?)^```[ \t]*$", re.S | re.M)
_FILE_MARK = re.compile(r"^\s*(?://|#|/\*)\s*file:\s*(\S+?)\s*(?:\*/)?\s*$")
_ADDR_MARK = re.compile(r"^\s*(?://|#|/\*)\s*(addresses|fixes):\s*(.*?)\s*(?:\*/)?\s*$")


@dataclass(frozen=True)
class CodeBlock:
    path: str
    text: str
    addresses: tuple[str, ...] = ()
    fixes: tuple[int, ...] = ()


def extract_code_blocks(response: str, primary_file: str = "main.c") -> list[CodeBlock]:
    """Fenced blocks, each optionally labeled by a ``// file: <path>`` first line.

    A single unlabeled block is the primary file. ``// addresses:`` and
    ``// fixes: CWE-<n>`` marker lines directly after the label are metadata
    and are stripped from the file text.
    """
    blocks: list[CodeBlock] = []
    unlabeled = 0
    for m in _FENCE.finditer(response):
        lines = m.group(1).splitlines()
        path = None
        if lines:
            fm = _FILE_MARK.match(lines[0])
            if fm:
                path = fm.group(1)
                lines = lines[1:]
        addresses: list[str] = []
        fixes: list[int] = []
        while lines:
            am = _ADDR_MARK.match(lines[0])
            if not am:
                break
            items = [x.strip() for x in am.group(2).split(",") if x.strip()]
            if am.group(1) == "addresses":
                addresses.extend(items)
            else:
                fixes.extend(int(x.upper().removeprefix("CWE-")) for x in items)
            lines = lines[1:]
        if path is None:
            unlabeled += 1
            path = primary_file
        text = "\n".join(lines) + "\n"
        blocks.append(CodeBlock(safe_relpath(path), text, tuple(addresses), tuple(fixes)))
    if unlabeled > 1:
        raise ExtractionError(f"{unlabeled} unlabeled code blocks; label them with '// file: <path>'")
    paths = [b.path for b in blocks]
    if len(set(paths)) != len(paths):
        raise ExtractionError("response contains two blocks for the same file")
    return blocks


def _prose(response: str) -> str:
    return " ".join(_FENCE.sub(" ", response).split())[:1000]


# -- firmware generation ------------------------------------------------------


def generate_firmware(
    task_spec: str,
    threat_model: ThreatModel,
    backend: Backend,
    *,
    prompts: dict[str, str] | None = None,
    primary_file: str = "main.c",
    temperature: float = FIRMWARE_TEMPERATURE,
    max_output_tokens: int = 8192,
    seed: int | None = None,
    backoff_s: float = 0.5,
) -> SourceTree:
    if not task_spec.strip():
        raise ValueError("task spec must be non-empty")
    prompts = prompts or load_prompts()
    mitigations = "\n".join(f"- {t.cwe.label} ({t.cwe.name}): {t.mitigation}" for t in threat_model.threats)
    request = GenerationRequest(
        Role.GENERATE_FIRMWARE,
        prompts["generate_firmware.system.txt"],
        render(prompts["generate_firmware.user.txt"], task_spec=task_spec.strip(), mitigations=mitigations, primary_file=primary_file),
        temperature,
        max_output_tokens,
        seed,
    )
    completion = complete_with_retry(backend, request, backoff_s=backoff_s)
    blocks = extract_code_blocks(completion.text, primary_file)
    if not blocks:
        raise ExtractionError("firmware response contains no fenced code blocks")
    return SourceTree.from_mapping({b.path: b.text for b in blocks})


# -- patches ------------------------------------------------------------------


@dataclass(frozen=True)
class PatchProposal:
    target_file: str
    replacement_source: str
    rationale: str = ""
    proposed_by: Proposer = Proposer.LLM
    addresses: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_file", safe_relpath(self.target_file))
        object.__setattr__(self, "proposed_by", Proposer(self.proposed_by))
        object.__setattr__(self, "addresses", tuple(self.addresses))
        if not self.replacement_source:
            raise ValueError("replacement source must be non-empty")

    @property
    def ref(self) -> str:
        h = hashlib.sha256(self.target_file.encode() + b"\x00" + self.replacement_source.encode())
        return h.hexdigest()[:16]

    def to_dict(self) -> dict[str, Any]:
        return {
            "ref": self.ref,
            "target-file": self.target_file,
            "replacement-source": self.replacement_source,
            "rationale": self.rationale,
            "proposed-by": self.proposed_by.value,
            "addresses": list(self.addresses),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PatchProposal:
        return cls(d["target-file"], d["replacement-source"], d.get("rationale", ""), Proposer(d["proposed-by"]), tuple(d.get("addresses", ())))


@dataclass
class VulnerabilityReport:
    findings: list[Finding]
    build_log: str | None = None
    advisories: list[str] = field(default_factory=list)

    @property
    def ids(self) -> set[str]:
        return {f.finding_id for f in self.findings}


def patch_request(report: VulnerabilityReport, tree: SourceTree, prompts: dict[str, str], *, temperature: float = PATCH_TEMPERATURE, max_output_tokens: int = 8192, seed: int | None = None) -> GenerationRequest:
    extra = []
    if report.build_log:
        extra.append("The firmware failed to build. Compiler output:\n" + report.build_log.strip() + "\n")
    if report.advisories:
        extra.append("Performance advisories:\n" + "\n".join(f"- {a}" for a in report.advisories) + "\n")
    user = render(
        prompts["generate_patch.user.txt"],
        count=str(len(report.findings)),
        findings=render_findings(report.findings) or "(none)",
        extra="\n".join(extra),
        sources=render_sources(tree),
    )
    return GenerationRequest(Role.GENERATE_PATCH, prompts["generate_patch.system.txt"], user, temperature, max_output_tokens, seed)


def _addresses(block: CodeBlock, report: VulnerabilityReport) -> tuple[str, ...]:
    ids = [f.finding_id for f in report.findings]
    if block.addresses:
        wanted = set(block.addresses)
        return tuple(i for i in ids if i in wanted)
    if block.fixes:
        cwes = set(block.fixes)
        return tuple(f.finding_id for f in report.findings if f.cwe.id in cwes)
    located = [f.finding_id for f in report.findings if f.location and f.location[0] == block.path]
    return tuple(located or ids)


def generate_patch(
    report: VulnerabilityReport,
    tree: SourceTree,
    backend: Backend,
    *,
    prompts: dict[str, str] | None = None,
    primary_file: str = "main.c",
    temperature: float = PATCH_TEMPERATURE,
    seed: int | None = None,
    backoff_s: float = 0.5,
) -> list[PatchProposal]:
    """One proposal per file the backend rewrote.

    A prose-only answer is retried once with a code-only instruction appended;
    if that also fails, ``RefusalError`` reaches the caller.
    """
    if not report.findings and not report.build_log and not report.advisories:
        raise ValueError("patch generation needs an open finding, a build failure or an advisory")
    prompts = prompts or load_prompts()
    request = patch_request(report, tree, prompts, temperature=temperature, seed=seed)
    for attempt in range(REFUSAL_ATTEMPTS):
        completion = complete_with_retry(backend, request, backoff_s=backoff_s)
        blocks = extract_code_blocks(completion.text, primary_file)
        if blocks:
            rationale = _prose(completion.text)
            return [
                PatchProposal(b.path, b.text, rationale, Proposer.LLM, _addresses(b, report))
                for b in blocks
            ]
        log.warning("patch response without code (attempt %d/%d)", attempt + 1, REFUSAL_ATTEMPTS)
        request = GenerationRequest(
            request.role,
            request.system_prompt,
            request.user_prompt + CODE_ONLY_INSTRUCTION,
            request.temperature,
            request.max_output_tokens,
            request.seed,
        )
    raise RefusalError("backend returned prose without code")


def apply_patches(tree: SourceTree, proposals: Iterable[PatchProposal]) -> SourceTree:
    """Return a new tree with proposals applied in order; the input is untouched."""
    files = tree.as_dict()
    chosen: dict[str, str] = {}
    for p in proposals:
        path = safe_relpath(p.target_file)
        if path in chosen and chosen[path] != p.replacement_source:
            raise PatchConflict(f"conflicting proposals for {path}")
        chosen[path] = p.replacement_source
    files.update(chosen)
    return SourceTree.from_mapping(files)
