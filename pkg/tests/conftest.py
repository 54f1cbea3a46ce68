import numpy as np
import pytest

from nbiot_otdoa.prs import plan_for


@pytest.fixture(scope="session")
def plan0():
    return plan_for(0)


@pytest.fixture(scope="session")
def plan8():
    return plan_for(8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``; returns ``ok``."""
    def record(n, ok, detail):
        _CRITERIA[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
