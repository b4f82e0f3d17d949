import numpy as np
import pytest
from hypothesis import given, strategies as st

from bsvdecide import (ControlSet, CostModel, DiffusionModel, DimensionError, NonFiniteError, TimeGrid,
                       brownian_increments, check_growth, load_bundle, save_bundle, simulate_paths)

from conftest import brownian, const_sigma, zero_drift


def test_time_grid():
    g = TimeGrid(0.0, 1.0, 4)
    assert g.dt == 0.25
    np.testing.assert_allclose(g.times, [0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 4)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)


def test_control_set_box_mesh():
    cs = ControlSet.box([-1.0], [1.0], [5])
    np.testing.assert_allclose(cs.points[:, 0], np.linspace(-1, 1, 5))
    assert ControlSet.from_dict(cs.to_dict()).points.tolist() == cs.points.tolist()
    with pytest.raises(ValueError):
        ControlSet.box([1.0], [0.0], [3])
    with pytest.raises(ValueError):
        ControlSet.mesh(np.empty((0, 1)))


def test_increments_repeatable_and_seed_sensitive():
    g = TimeGrid(0.0, 1.0, 1)
    a = brownian_increments(g, 1, 1, 42)
    np.testing.assert_array_equal(a, brownian_increments(g, 1, 1, 42))
    g = TimeGrid(0.0, 1.0, 10)
    assert np.any(brownian_increments(g, 5, 2, 1) != brownian_increments(g, 5, 2, 2))


def test_increment_variance_band():
    g = TimeGrid(0.0, 0.01, 1)
    dW = brownian_increments(g, 100_000, 1, 11)
    var = dW[:, 0, 0].var()
    assert abs(var - 0.01) <= 5 * 0.01 * np.sqrt(2 / 100_000)


def test_per_path_streams_independent_of_count_and_threads():
    g = TimeGrid(0.0, 1.0, 16)
    big = brownian_increments(g, 3000, 2, 5, n_workers=8)
    np.testing.assert_array_equal(big, brownian_increments(g, 3000, 2, 5, n_workers=1))
    np.testing.assert_array_equal(big[:10], brownian_increments(g, 10, 2, 5))


def test_brownian_paths_are_cumulative_increments():
    g = TimeGrid(0.0, 1.0, 32)
    b = simulate_paths(brownian(2), np.zeros(1), [0.0, 0.0], g, 50, seed=3)
    np.testing.assert_allclose(b.x[:, 1:], np.cumsum(b.dW, axis=1), atol=1e-13)
    np.testing.assert_array_equal(b.x[:, 0], 0.0)


def _ode_model(drift):
    return DiffusionModel(1, drift, const_sigma(0.0), ControlSet.mesh([[1.0]]), ellipticity_floor=None)


def test_deterministic_integrator_hits_one():
    b = simulate_paths(_ode_model(lambda t, x, u: np.array(u)), np.array([1.0]), [0.0], TimeGrid(0, 1, 7), 3, 0)
    np.testing.assert_allclose(b.x[:, -1, 0], 1.0, rtol=0, atol=1e-14)
    np.testing.assert_array_equal(b.controls, 1.0)


def test_decay_ode():
    b = simulate_paths(_ode_model(lambda t, x, u: -x), np.array([1.0]), [1.0], TimeGrid(0, 1, 10_000), 2, 0)
    assert abs(b.x[0, -1, 0] - np.exp(-1.0)) <= 1e-3


def test_open_loop_and_feedback_controls():
    model = DiffusionModel(1, lambda t, x, u: np.array(u), const_sigma(0.0), ControlSet.box([-1], [1], [3]),
                           ellipticity_floor=None)
    g = TimeGrid(0.0, 1.0, 4)
    seq = np.array([[1.0], [0.0], [-1.0], [1.0]])
    b = simulate_paths(model, seq, [0.0], g, 2, 0)
    np.testing.assert_allclose(b.x[0, :, 0], [0, 0.25, 0.25, 0, 0.25])
    fb = simulate_paths(model, lambda k, t, x: -np.sign(x) - (x == 0), [0.3], g, 2, 0)
    assert fb.controls.shape == (2, 4, 1)
    with pytest.raises(DimensionError):
        simulate_paths(model, seq, [0.0, 1.0], g, 2, 0)


def test_non_finite_state_reports_location():
    model = _ode_model(lambda t, x, u: np.where(t > 0.5, np.inf, 0.0) * np.ones_like(x))
    with pytest.raises(NonFiniteError) as info:
        simulate_paths(model, np.array([1.0]), [0.0], TimeGrid(0, 1, 4), 2, 0)
    assert info.value.location == (0, 4)


def test_ellipticity_gate():
    model = DiffusionModel(1, zero_drift, const_sigma(0.0), ControlSet.mesh([[0.0]]))
    with pytest.raises(ValueError, match="ellipticity"):
        simulate_paths(model, np.zeros(1), [0.0], TimeGrid(0, 1, 4), 4, 0)


def test_weak_second_moment_two_dims():
    g = TimeGrid(0.0, 1.0, 64)
    b = simulate_paths(brownian(2), np.zeros(1), [0.0, 0.0], g, 10_000, seed=8)
    psi = np.sum(b.x[:, -1] ** 2, axis=1)
    assert abs(psi.mean() - 2.0) <= 3 * psi.std() / np.sqrt(psi.size)


def test_strong_order_half():
    # geometric Brownian motion: multiplicative noise, so Euler-Maruyama is strong order 1/2
    mu, sig = 0.05, 1.0
    model = DiffusionModel(1, lambda t, x, u: mu * x, lambda t, x, u: sig * x[:, :, None],
                           ControlSet.mesh([[0.0]]), ellipticity_floor=None)
    n_fine, N = 2 ** 11, 2000
    fine = TimeGrid(0.0, 1.0, n_fine)
    dW = brownian_increments(fine, N, 1, 21)
    ref = simulate_paths(model, np.zeros(1), [1.0], fine, N, 0, dW=dW).x[:, -1, 0]
    errs = []
    for m in (2 ** 3, 2 ** 4, 2 ** 5, 2 ** 6):
        coarse = dW.reshape(N, m, n_fine // m, 1).sum(axis=2)
        x = simulate_paths(model, np.zeros(1), [1.0], TimeGrid(0.0, 1.0, m), N, 0, dW=coarse).x[:, -1, 0]
        errs.append(np.mean(np.abs(x - ref)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert 0.3 <= orders.mean() <= 0.7, orders


def test_growth_examples():
    zero = DiffusionModel(1, zero_drift, const_sigma(0.0), ControlSet.mesh([[0.0]]), ellipticity_floor=None)
    zcost = CostModel(1, lambda t, x, u: np.zeros((x.shape[0], 1)), lambda x: np.zeros((x.shape[0], 1)))
    rng = np.random.default_rng(0)
    cloud = (rng.uniform(0, 1, 200), rng.normal(0, 3, (200, 1)), np.zeros((200, 1)))
    rep = check_growth(zero, zcost, cloud, p=1, C=1e-9)
    assert rep.ratio == 0.0 and rep.passes

    lin = DiffusionModel(1, lambda t, x, u: x.copy(), const_sigma(0.0), ControlSet.mesh([[0.0]]),
                         ellipticity_floor=None)
    rep = check_growth(lin, zcost, cloud, p=1, C=1.0)
    assert rep.ratio < 1.0 and rep.passes

    qcost = CostModel(1, zcost.c, lambda x: x ** 2)
    ratios = []
    for radius in (1.0, 10.0, 100.0):
        x = np.linspace(-radius, radius, 101)[:, None]
        rep = check_growth(zero, qcost, (np.zeros(101), x, np.zeros((101, 1))), p=1, C=5.0)
        ratios.append(rep.ratio)
    assert ratios[0] < ratios[1] < ratios[2] and not rep.passes


def test_bundle_round_trip(tmp_path):
    b = simulate_paths(brownian(1), np.zeros(1), [0.5], TimeGrid(0, 1, 8), 5, seed=4)
    save_bundle(b, tmp_path)
    back = load_bundle(tmp_path)
    np.testing.assert_array_equal(back.x, b.x)
    np.testing.assert_array_equal(back.dW, b.dW)
    np.testing.assert_array_equal(back.controls, b.controls)
    assert back.seed == 4 and back.grid == b.grid


@given(seed=st.integers(0, 2 ** 63 - 1), n=st.integers(1, 40))
def test_seed_determinism_property(seed, n):
    g = TimeGrid(0.0, 0.5, 5)
    a = simulate_paths(brownian(1), np.zeros(1), [0.0], g, n, seed)
    b = simulate_paths(brownian(1), np.zeros(1), [0.0], g, n, seed)
    np.testing.assert_array_equal(a.x, b.x)
