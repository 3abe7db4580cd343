from __future__ import annotations

from pathlib import Path

import pytest

from firmguard.campaign import CampaignConfig
from firmguard.model import load_threat_model

FIXTURES = Path(__file__).parent / "fixtures"
FLAGSHIP = FIXTURES / "flagship" / "campaign.toml"


@pytest.fixture(scope="session")
def model():
    return load_threat_model()


@pytest.fixture
def flagship_config() -> CampaignConfig:
    return CampaignConfig.load(FLAGSHIP)


# Filled by test_acceptance.py; printed once at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
