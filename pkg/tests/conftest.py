import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, os.path.join(ROOT, "tools", "fvc-toolkit"))

from components import ZipLoad  # noqa: E402
from netmodel import Bus, DnStateSpace, Line, NetworkDescription  # noqa: E402
from scenario_io import parse_scenario  # noqa: E402
from simulator import ScenarioRunner  # noqa: E402

SCENARIOS = os.path.join(ROOT, "data", "scenarios")
DESK = os.path.join(SCENARIOS, "desk_feeder.json")
IEEE37 = os.path.join(SCENARIOS, "ieee37_approx.json")

ZIP_P_WEIGHTS = (1.5, -2.3, 1.8)
ZIP_Q_WEIGHTS = (7.4, -12.0, 5.6)


class StaticBuilder:
    """Returns the same plant for every vertex scale."""

    def __init__(self, model):
        self.model = model

    def build(self, ka=1.0, lf=1.0, sr=1.0):
        return DnStateSpace(self.model.a, self.model.b_dg, self.model.b_nr, self.model.c_dg)


@pytest.fixture
def desk_path():
    return DESK


@pytest.fixture
def desk_scenario():
    return parse_scenario(DESK)


@pytest.fixture
def desk_runner(desk_scenario):
    return ScenarioRunner(desk_scenario, strategy="feedback-only")


@pytest.fixture
def scalar_plant():
    return DnStateSpace(a=[[-1.0]], b_dg=[[1.0]], b_nr=[[1.0]], c_dg=[[1.0]])


@pytest.fixture
def scalar_builder(scalar_plant):
    return StaticBuilder(scalar_plant)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_stable(rng, n, inputs=1, outputs=1, damping=0.5):
    """A = S - P with S skew and P >= damping * I, so every eigenvalue has real part <= -damping."""
    s = rng.standard_normal((n, n))
    r = rng.standard_normal((n, n)) / np.sqrt(n)
    a = (s - s.T) / 2.0 - (r @ r.T + damping * np.eye(n))
    b = rng.standard_normal((n, inputs))
    c = rng.standard_normal((outputs, n))
    return a, b, c


def radial_network(loads=(), lines=None, switches=(), sg_units=(), ig_units=(), base_mva=1.0):
    """slack -- b1 -- b2 feeder used by the network tests."""
    buses = (Bus("s", 4.16), Bus("b1", 4.16), Bus("b2", 4.16))
    if lines is None:
        lines = (Line("l1", "s", "b1", 0.01, 0.05), Line("l2", "b1", "b2", 0.02, 0.06, 0.001))
    return NetworkDescription(
        buses=buses,
        lines=tuple(lines),
        switches=tuple(switches),
        sg_units=tuple(sg_units),
        ig_units=tuple(ig_units),
        loads=tuple(loads),
        slack="s",
        base_mva=base_mva,
    )


def zip_test_load(load_id="ld", bus="b2", p_mw=0.1, q_mvar=0.05):
    return ZipLoad(load_id, bus, p_mw, q_mvar, ZIP_P_WEIGHTS, ZIP_Q_WEIGHTS)
