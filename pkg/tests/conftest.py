"""Shared fixtures for the test suite."""

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from demoforge.samples import arm7_urdf, bimanual_urdf, planar_urdf, write_task
from demoforge.urdfkin import parse_urdf

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def arm7():
    return parse_urdf(arm7_urdf())


@pytest.fixture(scope="session")
def bimanual():
    return parse_urdf(bimanual_urdf())


@pytest.fixture(scope="session")
def planar2():
    return parse_urdf(planar_urdf((1.0, 1.0)))


@pytest.fixture(scope="session")
def task_dirs(tmp_path_factory):
    """One written sample task per kind, shared by the whole session."""
    root = tmp_path_factory.mktemp("tasks")
    return {kind: write_task(kind, root / kind, n_demos=10, seed=7)
            for kind in ("tiger", "mug", "package", "drawer")}


def pytest_terminal_summary(terminalreporter):
    """Print one line per acceptance criterion that ran."""
    import re
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(results, key=lambda r: (int(re.match(r"\d+", str(r[0])).group()), str(r[0]))):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {str(num):>3}  {title}: {detail}")
