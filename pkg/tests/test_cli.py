from __future__ import annotations

import json
import subprocess
import sys

import pytest

from firmguard.cli import main

from conftest import FLAGSHIP


def test_run_metrics_export_triage(tmp_path, capsys):
    assert main(["run", str(FLAGSHIP), "--root", str(tmp_path / "runs")]) == 0
    out = capsys.readouterr().out
    assert "campaign flagship: converged after 2 iteration(s)" in out
    assert "VRR 100.00%  TMCS 100.00%" in out
    campaign = tmp_path / "runs" / "flagship"

    assert main(["metrics", str(campaign)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["vrr"] == 100.0 and "campaign" in summary["markers"]
    assert main(["metrics", str(campaign), "--iteration", "0"]) == 0
    assert json.loads(capsys.readouterr().out)["markers"] == ["baseline"]
    assert main(["metrics", str(campaign), "--iteration", "9"]) == 1

    assert main(["export", str(campaign), str(tmp_path / "ds")]) == 0
    assert (tmp_path / "ds" / "manifest.json").is_file()
    assert main(["export", str(campaign), str(tmp_path / "ds")]) == 1
    assert "not empty" in capsys.readouterr().err
    assert main(["export", str(campaign), str(tmp_path / "ds"), "--force"]) == 0

    assert main(["resume", str(campaign)]) == 0
    assert main(["triage", str(campaign), "0" * 32, "--status", "fixed", "--note", "x"]) == 1


def test_compare(tmp_path, capsys):
    assert main(["compare", str(FLAGSHIP), "--out", str(tmp_path / "cmp")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("Metric,LLM Only,All Agents\n")
    assert (tmp_path / "cmp" / "comparison" / "radar.tsv").is_file()
    assert main(["compare", str(FLAGSHIP), "--variants", "llm-only,wizard", "--out", str(tmp_path / "x")]) == 1


def test_errors_exit_one(tmp_path, capsys):
    assert main(["resume", str(tmp_path / "nope")]) == 1
    assert main(["run", str(tmp_path / "missing.toml")]) == 1
    with pytest.raises(SystemExit):
        main(["triage", str(tmp_path), "abc", "--status", "open", "--note", "n"])


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "firmguard.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("run", "resume", "export", "compare", "metrics", "triage"):
        assert cmd in proc.stdout
