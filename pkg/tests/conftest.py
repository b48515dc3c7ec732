import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from claps.nn import Mlp
from claps.spectrl import Box, Region
from claps.system import ReachAvoidTask, StochasticSystem, TriangularNoise

settings.register_profile("claps", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "claps"))


# ---------------------------------------------------------------------------
# 1D contraction: x' = 0.5 x, no noise, target [0, 0.1]
# ---------------------------------------------------------------------------

CONTRACTION_SLOPE = 0.85
CONTRACTION_OFFSET = 0.1


def contraction_system() -> StochasticSystem:
    return StochasticSystem(Box((0.0,), (1.0,)), Box((-1.0,), (1.0,)), TriangularNoise((0.5,)),
                            a=(0.5,), b=(0.0,), g=(0.0,))


def contraction_task(unsafe: Region | None = None) -> ReachAvoidTask:
    return ReachAvoidTask(Region.of(Box((0.9,), (1.0,))), Region.of(Box((0.0,), (0.1,))),
                          unsafe if unsafe is not None else Region.empty(1))


def zero_policy(d: int = 1) -> Mlp:
    return Mlp([np.zeros((d, d))], [np.zeros(d)], "tanh", -np.ones(d), np.ones(d))


def affine_rasm() -> Mlp:
    """V(x) = 0.85 |x| + 0.1 written as relu units; V <= 0.95 on the initial set."""
    W1 = np.array([[1.0], [-1.0]])
    b1 = np.zeros(2)
    W2 = np.array([[CONTRACTION_SLOPE, CONTRACTION_SLOPE]])
    b2 = np.array([CONTRACTION_OFFSET])
    return Mlp([W1, W2], [b1, b2], "identity")


BUMP_LO, BUMP_HI, BUMP_HEIGHT = 0.3, 0.35, 0.5


def perturbed_rasm() -> Mlp:
    """The affine V plus a bump ``relu(h - s |x - m|)`` supported on [0.3, 0.35].

    Successors of x in [0.6, 0.7] land on the bump, so decrease fails there.
    The bump is its own second-layer unit, so it is inactive away from it.
    """
    m = 0.5 * (BUMP_LO + BUMP_HI)
    s = BUMP_HEIGHT / (m - BUMP_LO)
    W1 = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    b1 = np.array([0.0, 0.0, -m, m])
    W2 = np.array([[CONTRACTION_SLOPE, CONTRACTION_SLOPE, 0.0, 0.0], [0.0, 0.0, -s, -s]])
    b2 = np.array([CONTRACTION_OFFSET, BUMP_HEIGHT])
    W3 = np.array([[1.0, 1.0]])
    return Mlp([W1, W2, W3], [b1, b2, np.zeros(1)], "identity")


@pytest.fixture
def contraction():
    return contraction_system(), contraction_task()


@pytest.fixture(scope="session")
def nine():
    from claps.ninerooms import load_nine_rooms, nine_rooms_graph
    st = load_nine_rooms()
    return st, nine_rooms_graph(st)


# ---------------------------------------------------------------------------
# Acceptance summary: one PASS/FAIL line per criterion at the end of the run
# ---------------------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        status, line = ACCEPTANCE[k]
        terminalreporter.write_line(f"{status} criterion {k}: {line}")
