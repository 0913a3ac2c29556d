from __future__ import annotations

from pathlib import Path

import pytest

INPUTS = Path(__file__).resolve().parents[1] / "inputs"

# Lines appended by the acceptance suite; echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def inputs() -> Path:
    return INPUTS


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
