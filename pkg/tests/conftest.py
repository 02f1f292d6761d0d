from __future__ import annotations

import logging

import numpy as np
import pytest

from sonar3d.geom import SonarGeometry
from sonar3d.mesh import bumpy_sphere, icosphere


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR)


@pytest.fixture
def geometry() -> SonarGeometry:
    return SonarGeometry()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def truth_mesh():
    return bumpy_sphere(0.1, 4)


@pytest.fixture(scope="session")
def small_sphere():
    return icosphere(0.08, 2)


# acceptance bookkeeping: one summary line per criterion
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def detail(request):
    """Attach a measured value to the criterion line of the running test."""
    notes = []
    request.node._criterion_notes = notes
    return lambda text: notes.append(str(text))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    n = marker.args[0]
    ok = rep.passed
    notes = "; ".join(getattr(item, "_criterion_notes", []))
    entry = _CRITERIA.setdefault(n, {"ok": True, "parts": []})
    entry["ok"] &= ok
    entry["parts"].append(f"{item.name} {'pass' if ok else 'FAIL'}" + (f" ({notes})" if notes else ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}  "
                                    + " | ".join(e["parts"]))
