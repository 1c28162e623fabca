"""Shared fixtures and the acceptance-criteria reporting hook.

Tests marked ``@pytest.mark.criterion(n, "title")`` are the acceptance
gate; after any run that included them, one PASS/FAIL line per criterion is
printed so the gate's verdict is readable without digging through pytest
output.
"""

import numpy as np
import pytest

from mtldiff.schedule import NoiseSchedule


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(number, title): acceptance criterion with its summary line")
    config.addinivalue_line("markers", "slow: long-running statistical test")


_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call":
        _RESULTS[number] = (title, report.outcome)
    elif report.when == "setup" and report.outcome != "passed":
        _RESULTS[number] = (title, "error" if report.outcome == "failed" else report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_RESULTS):
        title, outcome = _RESULTS[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {number:02d} {verdict}  {title}")


@pytest.fixture(scope="session")
def schedule_1000() -> NoiseSchedule:
    return NoiseSchedule.linear(1000)


@pytest.fixture(scope="session")
def schedule_64() -> NoiseSchedule:
    return NoiseSchedule.linear(64)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20260823)
