from __future__ import annotations

import numpy as np
import pytest

from splitlab.chain import ChainSpec

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, text = mark.args
    detail = "; ".join(v for k, v in item.user_properties if k == "measured")
    status = "PASS" if rep.passed else "FAIL"
    prev = _CRITERIA.get(n)
    if prev is not None and prev[0] == "FAIL":
        status = "FAIL"
    _CRITERIA[n] = (status, text, detail if prev is None else "; ".join(x for x in (prev[2], detail) if x))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, text, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{status}] criterion {n}: {text}" + (f" | {detail}" if detail else ""))


@pytest.fixture
def measured(request):
    """Record a measured quantity on the acceptance line of the running test."""

    def record(text: str) -> None:
        request.node.user_properties.append(("measured", text))

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def example_spec():
    """Single threshold with two subsets: gamma_1 = (0.01, 0.5), f_1 = (0.1, 0.001)."""
    return ChainSpec([0.01, 0.5], (), [0.1, 0.001])


@pytest.fixture
def two_level_spec():
    return ChainSpec([0.05, 0.1], ([[0.2, 0.1], [0.1, 0.3]],), [0.5, 0.3])
