from __future__ import annotations

import json
import shutil

import pytest

from firmguard.analyzers import (
    AdapterError,
    AnalyzerMissing,
    ReportFormat,
    map_to_findings,
    parse_report,
    run_analyzer,
)
from firmguard.model import SourceTree

from conftest import FIXTURES

GOLDEN_KEYS = ("finding-id", "rule-id", "cwe", "severity", "evidence", "location")
CASES = {
    "cppcheck-network": ("cppcheck-network.xml", ReportFormat.CPPCHECK_XML),
    "clang-network": ("clang-network.sarif", ReportFormat.CLANG_SARIF),
    "gcc-network": ("gcc-network.txt", ReportFormat.GCC_TEXT),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_golden_finding_sets(name, model):
    fixture, fmt = CASES[name]
    golden = json.loads((FIXTURES / "analyzers" / "golden" / f"{name}.json").read_text(encoding="utf-8"))
    assert golden["format"] == fmt.value
    report = parse_report((FIXTURES / "analyzers" / fixture).read_text(encoding="utf-8"), fmt, golden["replay-root"])
    mapped = map_to_findings(report.records, model, analyzed_files=report.analyzed_files, sources=["network.c"])
    got = sorted(({k: f.to_dict()[k] for k in GOLDEN_KEYS} for f in mapped.findings), key=lambda d: d["finding-id"])
    assert got == sorted(golden["findings"], key=lambda d: d["finding-id"])
    assert sorted(r.to_dict()["check-id"] for r in mapped.uncategorized) == sorted(u["check-id"] for u in golden["uncategorized"])
    assert len(report.records) == golden["records"]
    assert len(mapped.findings) + len(mapped.uncategorized) == len(report.records)
    assert mapped.static_coverage == golden["static-coverage"]


def test_paths_are_relative_to_replay_root():
    text = (FIXTURES / "analyzers" / "cppcheck-network.xml").read_text(encoding="utf-8")
    assert {r.file for r in parse_report(text, "cppcheck-xml", "/tmp/fx").records} == {"network.c"}


@pytest.mark.parametrize(
    "text, fmt",
    [
        ("<results><errors>", ReportFormat.CPPCHECK_XML),
        ("<notcppcheck/>", ReportFormat.CPPCHECK_XML),
        ("{not json", ReportFormat.CLANG_SARIF),
        ('{"version": "2.1.0"}', ReportFormat.CLANG_SARIF),
    ],
)
def test_malformed_reports_keep_raw_text(text, fmt):
    with pytest.raises(AdapterError) as err:
        parse_report(text, fmt)
    assert err.value.raw_head == text


def test_gcc_text_ignores_noise():
    text = "In function 'main':\nnetwork.c:3:1: note: here\nnetwork.c:4:2: warning: unused variable 'x' [-Wunused-variable]\n"
    records = parse_report(text, "generic-gcc-text").records
    assert [(r.line, r.check_id) for r in records] == [(4, "Wunused-variable")]


def test_coverage_counts_only_sources(model):
    mapped = map_to_findings([], model, analyzed_files={"a.c"}, sources=["a.c", "b.c"])
    assert mapped.static_coverage == 0.5
    assert map_to_findings([], model, sources=[]).static_coverage == 0.0


def test_missing_tool_is_reported():
    tree = SourceTree.from_mapping({"main.c": "int main(void){return 0;}\n"})
    with pytest.raises(AnalyzerMissing):
        run_analyzer(tree, "definitely-not-an-analyzer {files}", "cppcheck-xml")
    with pytest.raises(ValueError):
        run_analyzer(tree, None, "clang-sarif")


def test_replay_reads_file():
    report = run_analyzer(
        SourceTree.from_mapping({"x.c": ""}), None, "clang-sarif",
        replay=FIXTURES / "analyzers" / "clang-network.sarif", replay_root="/tmp/fx",
    )
    assert len(report.records) == 3


@pytest.mark.skipif(shutil.which("gcc") is None, reason="gcc not installed")
def test_live_gcc_run(model):
    tree = SourceTree.from_mapping({"net.c": (FIXTURES / "analyzers" / "network.c").read_text(encoding="utf-8")})
    report = run_analyzer(tree, "gcc -fsyntax-only -Wall -Wextra -O2 -Warray-bounds {files}", "generic-gcc-text")
    assert report.analyzed_files == {"net.c"}
    mapped = map_to_findings(report.records, model, analyzed_files=report.analyzed_files, sources=["net.c"])
    assert mapped.static_coverage == 1.0
    assert len(mapped.findings) + len(mapped.uncategorized) == len(report.records)
