from __future__ import annotations

import json

import httpx
import pytest

from firmguard import llm
from firmguard.llm import (
    Completion,
    ExtractionError,
    GenerationRequest,
    HttpBackend,
    MockBackend,
    PatchConflict,
    PatchProposal,
    Proposer,
    RefusalError,
    Role,
    TransportError,
    VulnerabilityReport,
)
from firmguard.model import PathEscape, Source, SourceTree, Finding

from conftest import FIXTURES


class Scripted:
    """Backend answering from a list; strings are responses, exceptions are raised."""

    def __init__(self, *answers):
        self.answers = list(answers)
        self.requests = []
        self.tokens_used = 0

    def complete(self, request):
        self.requests.append(request)
        answer = self.answers.pop(0)
        if isinstance(answer, Exception):
            raise answer
        return Completion(answer, 10)


def _request(user="hello"):
    return GenerationRequest(Role.GENERATE_PATCH, "sys", user, 0.2)


def _finding(model, rule_id="log-overflow", evidence="OVERFLOW", location=None):
    return Finding.create(model.rule(rule_id), evidence, Source.FUZZ, location=location)


def test_request_validation():
    with pytest.raises(ValueError):
        GenerationRequest(Role.REVIEW, "", "u")
    with pytest.raises(ValueError):
        GenerationRequest(Role.REVIEW, "s", "u", temperature=2.5)
    with pytest.raises(ValueError):
        GenerationRequest(Role.REVIEW, "s", "u", max_output_tokens=0)
    assert _request().digest() == _request().digest() != _request("other").digest()


def test_mock_backend_digest_then_playback(tmp_path):
    (tmp_path / "by-digest").mkdir()
    (tmp_path / "playback").mkdir()
    keyed = _request("keyed")
    (tmp_path / "by-digest" / f"{keyed.digest()}.md").write_text("keyed answer", encoding="utf-8")
    (tmp_path / "playback" / "001.md").write_text("first", encoding="utf-8")
    (tmp_path / "playback" / "002.transport-error").write_text("", encoding="utf-8")
    backend = MockBackend(tmp_path)
    assert backend.complete(keyed).text == "keyed answer"
    assert backend.complete(_request()).text == "first"
    with pytest.raises(TransportError):
        backend.complete(_request())
    with pytest.raises(TransportError, match="exhausted"):
        backend.complete(_request())
    assert backend.cursor == 2 and len(backend.requests) == 4
    with pytest.raises(TransportError, match="scripted"):
        MockBackend(tmp_path, cursor=1).complete(_request())


def test_retry_backs_off_exponentially():
    sleeps = []
    backend = Scripted(TransportError("a"), TransportError("b"), "ok")
    assert llm.complete_with_retry(backend, _request(), backoff_s=0.5, sleep=sleeps.append).text == "ok"
    assert sleeps == [0.5, 1.0]
    with pytest.raises(TransportError):
        llm.complete_with_retry(Scripted(*[TransportError("x")] * 3), _request(), sleep=sleeps.append)


def test_http_backend_speaks_chat_completions():
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json={"choices": [{"message": {"content": "hi"}}], "usage": {"total_tokens": 42}})

    client = httpx.Client(transport=httpx.MockTransport(handler))
    backend = HttpBackend("http://llm.test/v1/chat/completions", "k", "m", requests_per_s=1000, client=client)
    out = backend.complete(GenerationRequest(Role.GENERATE_FIRMWARE, "s", "u", 0.7, 100, seed=3))
    assert out == Completion("hi", 42) and backend.tokens_used == 42
    assert seen["auth"] == "Bearer k"
    assert seen["body"]["messages"][0] == {"role": "system", "content": "s"}
    assert seen["body"]["seed"] == 3 and seen["body"]["temperature"] == 0.7


@pytest.mark.parametrize("response", [httpx.Response(503, text="busy"), httpx.Response(200, json={"nope": 1})])
def test_http_backend_errors_are_transport_errors(response):
    client = httpx.Client(transport=httpx.MockTransport(lambda r: response))
    with pytest.raises(TransportError):
        HttpBackend("http://llm.test", client=client, requests_per_s=1000).complete(_request())


def test_from_env_requires_url(monkeypatch):
    monkeypatch.delenv(llm.ENV_URL, raising=False)
    with pytest.raises(llm.GatewayError):
        HttpBackend.from_env()


def test_token_bucket_limits_rate():
    now = [0.0]
    bucket = llm.TokenBucket(2.0, clock=lambda: now[0])
    bucket.acquire()
    now[0] = 0.5
    bucket.acquire()
    assert bucket.tokens == pytest.approx(0.0)


def test_every_prompt_placeholder_is_supplied():
    prompts = llm.load_prompts()
    assert set(prompts) == set(llm.PROMPT_FILES)
    supplied = {"task_spec", "mitigations", "primary_file", "count", "findings", "extra", "sources"}
    for name, text in prompts.items():
        assert set(llm._PLACEHOLDER.findall(text)) <= supplied, name
    with pytest.raises(KeyError):
        llm.render("{missing}")
    assert llm.render("{a} {b}", a="{b}", b="x") == "{b} x"


def test_extract_blocks_with_markers():
    text = (
        "Fixed.\n```c\n// file: src/net.c\n// addresses: abc, def\n// fixes: CWE-120\nint x;\n```\n"
        "```c\nint main(void){}\n```\n"
    )
    net, main = llm.extract_code_blocks(text, "main.c")
    assert (net.path, net.addresses, net.fixes, net.text) == ("src/net.c", ("abc", "def"), (120,), "int x;\n")
    assert main.path == "main.c"


@pytest.mark.parametrize(
    "text, err",
    [
        ("```\na\n```\n```\nb\n```\n", ExtractionError),
        ("```\n// file: a.c\nx\n```\n```\n// file: a.c\ny\n```\n", ExtractionError),
        ("```\n// file: ../escape.c\nx\n```\n", PathEscape),
    ],
)
def test_extraction_errors(text, err):
    with pytest.raises(err):
        llm.extract_code_blocks(text)


def test_generate_firmware_from_flagship_mock(model):
    backend = MockBackend(FIXTURES / "flagship" / "mock")
    tree = llm.generate_firmware("Two tasks.", model, backend, seed=1)
    assert tree.paths() == ["main.c"]
    assert "strcpy" in tree.get("main.c")
    request = backend.requests[0]
    assert request.role is Role.GENERATE_FIRMWARE and request.temperature == llm.FIRMWARE_TEMPERATURE
    assert "CWE-120" in request.user_prompt and "Two tasks." in request.user_prompt
    with pytest.raises(ExtractionError):
        llm.generate_firmware("Two tasks.", model, Scripted("no code at all"))
    with pytest.raises(ValueError):
        llm.generate_firmware("  ", model, Scripted())


def test_generate_patch_maps_addresses(model):
    overflow = _finding(model, location=("main.c", 4))
    missed = _finding(model, "log-missed-deadline", "MISSED DEADLINE task=Net")
    race = _finding(model, "log-race", "data race on counter")
    report = VulnerabilityReport([overflow, missed, race])
    backend = Scripted("Bounded.\n```c\n// fixes: CWE-120, CWE-400\nint main(void){}\n```\n")
    [proposal] = llm.generate_patch(report, SourceTree.from_mapping({"main.c": "old\n"}), backend)
    assert proposal.addresses == (overflow.finding_id, missed.finding_id)
    assert proposal.rationale == "Bounded."
    assert proposal.proposed_by is Proposer.LLM
    assert backend.requests[0].temperature == llm.PATCH_TEMPERATURE
    assert overflow.finding_id in backend.requests[0].user_prompt


def test_prose_only_patch_retries_then_refuses(model):
    report = VulnerabilityReport([_finding(model)])
    tree = SourceTree.from_mapping({"main.c": "x\n"})
    backend = Scripted("I cannot help.", "```c\nfixed\n```\n")
    assert llm.generate_patch(report, tree, backend)[0].replacement_source == "fixed\n"
    assert backend.requests[1].user_prompt.endswith(llm.CODE_ONLY_INSTRUCTION)
    with pytest.raises(RefusalError):
        llm.generate_patch(report, tree, Scripted("no.", "still no."))


def test_patch_needs_something_to_fix():
    with pytest.raises(ValueError):
        llm.generate_patch(VulnerabilityReport([]), SourceTree.from_mapping({"a.c": "x"}), Scripted())
    backend = Scripted("```c\nok\n```\n")
    llm.generate_patch(VulnerabilityReport([], build_log="main.c:1: error: boom"), SourceTree.from_mapping({"main.c": "x"}), backend)
    assert "error: boom" in backend.requests[0].user_prompt


def test_apply_patches():
    tree = SourceTree.from_mapping({"a.c": "old a\n", "b.c": "old b\n"})
    p1 = PatchProposal("a.c", "new a\n")
    new = llm.apply_patches(tree, [p1, p1, PatchProposal("c.c", "c\n", proposed_by=Proposer.THREAT)])
    assert new.as_dict() == {"a.c": "new a\n", "b.c": "old b\n", "c.c": "c\n"}
    assert tree.get("a.c") == "old a\n"
    with pytest.raises(PatchConflict):
        llm.apply_patches(tree, [p1, PatchProposal("a.c", "other\n")])
    with pytest.raises(ValueError):
        PatchProposal("a.c", "")
    assert PatchProposal.from_dict(p1.to_dict()) == p1
    assert p1.to_dict()["ref"] == p1.ref and len(p1.ref) == 16
