"""Shared test helpers and the acceptance-suite reporter."""

import numpy as np
import pytest

ACCEPTANCE_RESULTS = []


def record_acceptance(number, name, ok, detail=""):
    ACCEPTANCE_RESULTS.append((number, name, bool(ok), detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number:2d} [{status}] {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
