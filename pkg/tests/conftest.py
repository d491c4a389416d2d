from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maneuver_eval.dataset import fixture_corpus_dir, load_corpus
from maneuver_eval.trajectory import FUTURE_LENGTH, Trajectory

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

coords = st.floats(-200.0, 200.0, allow_nan=False, allow_infinity=False)


def xy_arrays(n: int = FUTURE_LENGTH):
    return arrays(np.float64, (n, 2), elements=coords)


def futures():
    return xy_arrays().map(Trajectory.future)


angles = st.floats(-np.pi, np.pi, allow_nan=False)
offsets = st.tuples(coords, coords)


@pytest.fixture(scope="session")
def corpus():
    return load_corpus(fixture_corpus_dir())


@pytest.fixture(scope="session")
def corpus_dir():
    return fixture_corpus_dir()


def straight(speed: float, n: int = FUTURE_LENGTH, t0: float = 0.2) -> Trajectory:
    t = t0 + 0.2 * np.arange(n)
    return Trajectory(np.column_stack([speed * t, np.zeros(n)]), dt=0.2, t0=t0)


ACCEPTANCE_VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in sorted(ACCEPTANCE_VERDICTS):
            terminalreporter.write_line(line)
