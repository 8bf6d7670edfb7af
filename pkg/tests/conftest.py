from __future__ import annotations

import sys
from pathlib import Path

import pytest

from djcsim.syntax import load_program

HERE = Path(__file__).parent
CORPUS = HERE / "corpus"
sys.path.insert(0, str(HERE))


def program(name: str):
    return load_program((CORPUS / name).read_text())


@pytest.fixture
def corpus() -> Path:
    return CORPUS


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
