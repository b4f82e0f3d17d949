import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bsvdecide import (Ball, Box, ControlSet, CostModel, DiffusionModel, Driver, FullSpace, HalfSpace,
                       Intersection, Orthant, RegressionBasis, SpaceGrid, TimeGrid, solve_system)

settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def const_sigma(s, d=1):
    return lambda t, x, u: np.broadcast_to(s * np.eye(d), (x.shape[0], d, d)).copy()


def zero_drift(t, x, u):
    return np.zeros_like(x)


def zero_c(n=1):
    return lambda t, x, u: np.zeros((x.shape[0], n))


ZERO = Driver(1, lambda t, y, z, j: np.zeros(y.shape[0]), 0.0, "zero")


def linear_decay(r):
    return Driver(1, lambda t, y, z, j: -r * y[:, j], r, "linear-decay")


def heat_problem():
    model = DiffusionModel(1, zero_drift, const_sigma(np.sqrt(2.0)), ControlSet.mesh([[0.0]]), name="heat")
    cost = CostModel(1, zero_c(), lambda x: x ** 2)
    return model, cost, ZERO


def lqr_problem(sigma=0.1, n_mesh=41):
    model = DiffusionModel(1, lambda t, x, u: np.array(u, dtype=float), const_sigma(sigma),
                           ControlSet.box([-4.0], [4.0], [n_mesh]), lipschitz_hint=1.0, name="lqr")
    cost = CostModel(1, lambda t, x, u: x ** 2 + u ** 2, lambda x: x ** 2)
    return model, cost, ZERO


def brownian(d=1):
    return DiffusionModel(d, zero_drift, const_sigma(1.0, d), ControlSet.mesh([[0.0]]), name="bm")


HEAT_SPACE = SpaceGrid([-6.0], [6.0], 201)
HEAT_TIME = TimeGrid(0.0, 0.25, 200)
LQR_SPACE = SpaceGrid([-3.0], [3.0], 201)
LQR_TIME = TimeGrid(0.0, 0.5, 200)
BASIS = RegressionBasis("polynomial", degree=2)


@pytest.fixture(scope="session")
def heat_values():
    model, cost, driver = heat_problem()
    return solve_system(model, cost, driver, HEAT_SPACE, HEAT_TIME)


@pytest.fixture(scope="session")
def lqr_values():
    model, cost, driver = lqr_problem()
    return solve_system(model, cost, driver, LQR_SPACE, LQR_TIME)


def set_kinds():
    """One instance of every set kind, in two dimensions unless the kind is scalar by nature."""
    return {
        "box": Box([-1.0, 0.0], [1.0, 2.0]),
        "ball": Ball([0.5, -0.5], 1.5),
        "halfspace": HalfSpace([0.6, 0.8], 0.3),
        "orthant": Orthant(2),
        "fullspace": FullSpace(2),
        "intersection": Intersection([Ball([0.0, 0.0], 2.0), HalfSpace([1.0, 0.0], 0.5), Orthant(2)]),
    }


_ACCEPT = []


@pytest.fixture
def acceptance(request):
    """Record a one-line verdict for the acceptance summary."""
    def record(number, passed, detail):
        _ACCEPT.append((number, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPT:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_ACCEPT):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
