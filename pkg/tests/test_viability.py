import numpy as np
import pytest
from hypothesis import given, strategies as st

from bsvdecide import (Box, ConvexSet, CostModel, DimensionError, Driver, FullSpace, Orthant,
                       ResampleBudgetExceeded, SampleCloudSpec, SpaceGrid, TimeGrid, check_condition_3_3,
                       empirical_viability, grid_viability, minimal_constant, simulate_paths, solve_bsde,
                       solve_system)

from conftest import BASIS, ZERO, brownian, linear_decay, zero_c

MODEL = brownian(1)
ZCOST = CostModel(1, zero_c(), lambda x: np.zeros_like(x))
PUSH = Driver(1, lambda t, y, z, j: np.full(y.shape[0], -1.0), 0.0, "push")


def cloud(n=2000, y=(-10.0, 10.0), z=(-2.0, 2.0), dim=1):
    return SampleCloudSpec(t_range=(0.0, 1.0), x_lo=np.array([-2.0]), x_hi=np.array([2.0]),
                           y_lo=np.full(dim, y[0]), y_hi=np.full(dim, y[1]), z_lo=z[0], z_hi=z[1], n_samples=n)


def test_fullspace_margin_identically_zero():
    rep = check_condition_3_3(FullSpace(1), PUSH, ZCOST, MODEL, cloud(500), C=1.0)
    assert rep.passed and rep.worst_margin == 0.0
    assert rep.kind == "Condition33"


def test_linear_decay_passes_and_matches_sweep():
    drv = linear_decay(1.0)
    rep = check_condition_3_3(Orthant(1), drv, ZCOST, MODEL, cloud(), C=1.0, seed=3)
    assert rep.passed
    ys = np.linspace(-10, 10, 20001)
    yneg = np.minimum(ys, 0.0)
    # z = 0 slice of the margin: C y-^2 - (y - y+)(-y)
    sweep = 1.0 * yneg ** 2 - yneg * (-ys)
    assert sweep.min() >= 0.0
    assert rep.worst_margin >= sweep.min() - 1e-10


def test_negative_push_fails_at_analytic_witness():
    C = 2.0
    rep = check_condition_3_3(Orthant(1), PUSH, ZCOST, MODEL, cloud(10_000, y=(-2.0, 2.0), z=(0.0, 0.0)),
                              C=C, seed=1)
    assert not rep.passed
    ys = np.linspace(-2, 2, 400001)
    yneg = np.minimum(ys, 0.0)
    sweep = C * yneg ** 2 - yneg * (-1.0)
    i = np.argmin(sweep)
    assert sweep[i] == pytest.approx(-1 / (4 * C), abs=1e-8)
    assert ys[i] == pytest.approx(-1 / (2 * C), abs=1e-4)
    assert sweep[i] <= rep.worst_margin <= sweep[i] + 1e-3
    assert rep.worst_witness["y"][0] == pytest.approx(-1 / (2 * C), abs=0.05)
    assert "FAIL" in rep.summary_line()


def test_monotone_in_C():
    prev = None
    for C in (0.5, 1.0, 2.0, 8.0):
        rep = check_condition_3_3(Orthant(1), PUSH, ZCOST, MODEL, cloud(800), C=C, seed=4)
        if prev is not None:
            assert rep.worst_margin >= prev - 1e-12
        prev = rep.worst_margin


def test_minimal_constant():
    assert minimal_constant(Orthant(1), linear_decay(0.5), ZCOST, MODEL, cloud(500)) == 1.0
    # constant push: C |y| >= 1 must hold at every sampled y < 0
    assert minimal_constant(Orthant(1), PUSH, ZCOST, MODEL, cloud(500, y=(-1.0, -0.5))) == 2.0
    assert minimal_constant(Orthant(1), PUSH, ZCOST, MODEL, cloud(50, y=(-1e-7, -1e-7), z=(0.0, 0.0))) is None
    # outward drift proportional to the distance: the condition needs C >= kappa
    outward = Driver(1, lambda t, y, z, j: 4.0 * np.minimum(y[:, 0], 0.0), 4.0)
    assert minimal_constant(Orthant(1), outward, ZCOST, MODEL, cloud(500)) == 4.0


def test_determinism_and_json():
    a = check_condition_3_3(Box([0.0, 0.0], [1.0, 1.0]), _pair(), CostModel(2, zero_c(2), lambda x: x),
                            MODEL, cloud(300, dim=2), C=1.0, seed=9)
    b = check_condition_3_3(Box([0.0, 0.0], [1.0, 1.0]), _pair(), CostModel(2, zero_c(2), lambda x: x),
                            MODEL, cloud(300, dim=2), C=1.0, seed=9)
    assert a.to_json() == b.to_json()
    assert '"worst_witness"' in a.to_json()


def _pair():
    return Driver(2, lambda t, y, z, j: -y[:, j] + 0.1 * z[:, 0], 1.1)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        check_condition_3_3(Orthant(2), PUSH, ZCOST, MODEL, cloud(10, dim=2), C=1.0)


class _Sphere(ConvexSet):
    """Unit circle: not convex, so the Hessian bound fails everywhere inside."""

    dim = 2

    def _project(self, a):
        r = np.linalg.norm(a, axis=-1, keepdims=True)
        return a / np.where(r > 0, r, 1.0)

    def to_dict(self):
        return {"kind": "sphere"}


def test_resample_budget():
    inside = SampleCloudSpec((0.0, 1.0), np.array([0.0]), np.array([1.0]), np.full(2, -0.5), np.full(2, 0.5),
                             n_samples=50)
    drv = Driver(2, lambda t, y, z, j: np.zeros(y.shape[0]))
    with pytest.raises(ResampleBudgetExceeded):
        check_condition_3_3(_Sphere(), drv, CostModel(2, zero_c(2), lambda x: x), MODEL, inside, C=1.0)


def test_C_must_be_positive():
    with pytest.raises(ValueError):
        check_condition_3_3(Orthant(1), PUSH, ZCOST, MODEL, cloud(10), C=0.0)


@given(seed=st.integers(0, 1000), r=st.floats(0.0, 3.0))
def test_fullspace_passes_for_every_driver(seed, r):
    drv = Driver(1, lambda t, y, z, j: -r * y[:, 0] + np.sin(z[:, 0]) - 5.0, r + 1.0)
    rep = check_condition_3_3(FullSpace(1), drv, ZCOST, MODEL, cloud(50), C=1.0, seed=seed)
    assert rep.passed


# empirical and grid viability

@pytest.fixture(scope="module")
def paths():
    return simulate_paths(MODEL, np.zeros(1), [0.0], TimeGrid(0.0, 1.0, 32), 4000, seed=12)


def test_empirical_fullspace(paths):
    sol = solve_bsde(paths, ZERO, paths.x[:, -1], BASIS)
    rep = empirical_viability(sol, FullSpace(1), 0.0)
    assert rep.passed and rep.worst_margin == 0.0


def test_empirical_positive_terminal(paths):
    sol = solve_bsde(paths, ZERO, paths.x[:, -1] ** 2, BASIS)
    assert empirical_viability(sol, Orthant(1), 5 * sol.residual_scale).passed


def test_empirical_negative_terminal(paths):
    sol = solve_bsde(paths, ZERO, -np.ones((paths.n_paths, 1)), BASIS)
    rep = empirical_viability(sol, Orthant(1), 1e-3)
    assert not rep.passed
    assert rep.worst_margin == pytest.approx(-1.0, abs=1e-9)
    # the terminal slice sits exactly one unit outside K
    np.testing.assert_array_equal(sol.y[:, -1], -1.0)
    assert 0 <= rep.worst_witness["step"] <= paths.grid.n_steps


def test_empirical_dimension(paths):
    sol = solve_bsde(paths, ZERO, paths.x[:, -1], BASIS)
    with pytest.raises(DimensionError):
        empirical_viability(sol, Orthant(2), 0.0)


def _small_heat(psi):
    space = SpaceGrid([-3.0], [3.0], 61)
    model = brownian(1)
    sol = solve_system(model, CostModel(1, zero_c(), psi), ZERO, space, TimeGrid(0.0, 0.1, 40))
    return space, sol


def test_grid_viability_heat_preserves_box():
    from scipy import integrate
    psi = lambda x: np.clip(x, -1.0, 1.0) * 0.5 + 0.5
    space, values = _small_heat(psi)
    rep = grid_viability(values, Box([0.0], [1.0]), 1e-9)
    assert rep.passed
    # independent check of the interior against the Gaussian convolution
    T = 0.1
    for x in (-1.0, 0.0, 0.6):
        exact = integrate.quad(lambda s: psi(np.array([[x + s]]))[0, 0] * np.exp(-s * s / (2 * T))
                               / np.sqrt(2 * np.pi * T), -8, 8, points=[-1 - x, 1 - x])[0]
        assert values.at(0, [x])[0, 0] == pytest.approx(exact, abs=5e-3)


def test_grid_viability_fullspace_and_terminal_violation():
    _, values = _small_heat(lambda x: x ** 2 - 0.01)
    assert grid_viability(values, FullSpace(1), 0.0).passed
    rep = grid_viability(values, Orthant(1), 1e-6)
    assert not rep.passed
    assert rep.worst_witness["step"] == values.tgrid.n_steps
    with pytest.raises(DimensionError):
        grid_viability(values, Orthant(2), 0.0)
