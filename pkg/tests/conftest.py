import os
from pathlib import Path

import numpy as np
import pytest

from mcclk.ingest import RATINGS_FILE, KG_FILE

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


def data_dir(kind):
    """Dataset directory under MCCLK_DATA, or None when absent."""
    root = os.environ.get("MCCLK_DATA")
    if not root:
        return None
    p = Path(root) / kind
    return p if p.is_dir() else None


def has_canonical(path):
    return path is not None and (path / RATINGS_FILE).is_file() and (path / KG_FILE).is_file()


@pytest.fixture
def report():
    """Record one acceptance verdict line; all lines are echoed at session end."""

    def emit(criterion, passed, detail):
        verdict = {True: "PASS", False: "FAIL", None: "NOT RUN"}[passed]
        ACCEPTANCE_LINES.append(f"criterion {criterion}: {verdict} - {detail}")

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
