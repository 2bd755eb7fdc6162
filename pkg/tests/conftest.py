import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spikedet.events import EventStream, SensorGeometry

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_stream(rng: np.random.Generator, geometry: SensorGeometry, n: int, t_max: int) -> EventStream:
    t = np.sort(rng.integers(0, t_max, size=n))
    x = rng.integers(0, geometry.width, size=n)
    y = rng.integers(0, geometry.height, size=n)
    p = rng.integers(0, 2, size=n)
    return EventStream(t, x, y, p)


def bursty_stream(rng: np.random.Generator, geometry: SensorGeometry, n: int, t_max: int) -> EventStream:
    """Random events concentrated around a few hot spots, so neurons actually spike."""
    hot = rng.integers(0, [geometry.width, geometry.height], size=(4, 2))
    pick = rng.integers(0, 4, size=n)
    spread = rng.integers(-2, 3, size=(n, 2))
    xy = np.clip(hot[pick] + spread, 0, [geometry.width - 1, geometry.height - 1])
    t = np.sort(rng.integers(0, t_max, size=n))
    return EventStream(t, xy[:, 0], xy[:, 1], rng.integers(0, 2, size=n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    # acceptance lines are collected by tests/test_acceptance.py as its tests run
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
