import os
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stationary_grad.kernels import warm_up

settings.register_profile("default", max_examples=40, deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_ACCEPTANCE_LINES = []
# outcomes of property-marked tests seen in this session, by node id
PROPERTY_OUTCOMES = {}
SESSION = {"start": None, "collected": set()}


def pytest_configure(config):
    config.addinivalue_line("markers", "property: property-based suites checked by the acceptance gate")
    config.addinivalue_line("markers", "acceptance: acceptance criteria with stated budgets")
    config.addinivalue_line("markers", "run_last: moved to the end of the session")


def pytest_sessionstart(session):
    SESSION["start"] = time.perf_counter()


def pytest_collection_modifyitems(session, config, items):
    SESSION["collected"] = {item.nodeid for item in items if item.get_closest_marker("property")}
    items.sort(key=lambda item: item.get_closest_marker("run_last") is not None)


def pytest_runtest_logreport(report):
    if report.nodeid in SESSION["collected"] and (report.when == "call" or report.failed):
        if PROPERTY_OUTCOMES.get(report.nodeid) != "failed":
            PROPERTY_OUTCOMES[report.nodeid] = report.outcome


@pytest.fixture(scope="session", autouse=True)
def _compiled_kernels():
    warm_up()


@pytest.fixture
def acceptance_line():
    """Record one pass/fail line; all lines are echoed in the terminal summary."""

    def record(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
