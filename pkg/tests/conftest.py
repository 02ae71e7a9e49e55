import numpy as np
import pytest

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def record(criterion, passed, detail=""):
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE, key=lambda c: int(c.split()[0])):
        ok, detail = ACCEPTANCE[crit]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {crit}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
