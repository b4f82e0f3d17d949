"""One verdict per acceptance criterion, printed in the terminal summary."""

import dataclasses
import json

import numpy as np
import pytest

from bsvdecide import (CostModel, Driver, Orthant, SampleCloudSpec, TimeGrid,
                       check_condition_3_3, conditional_g_expectation, distance_sq, dp_consistency,
                       empirical_viability, extract_policy, feynman_kac_crosscheck, hessian_distance_sq,
                       mollified_distance_sq, simulate_paths, solve_bsde)
from bsvdecide.cli import run
from bsvdecide.geometry import sample_points

from conftest import BASIS, LQR_TIME, brownian, heat_problem, linear_decay, lqr_problem, set_kinds, zero_c

SETS = set_kinds()


def test_criterion_1_linear_expectation(acceptance):
    paths = simulate_paths(brownian(1), np.zeros(1), [0.0], TimeGrid(0.0, 1.0, 128), 10_000, seed=101)
    cost = CostModel(1, zero_c(), lambda x: x ** 2)
    drv = Driver(1, lambda t, y, z, j: np.zeros(y.shape[0]))
    y0, sol = conditional_g_expectation(paths, drv, cost, BASIS)
    err, se = abs(y0[0] - 1.0), sol.y0_stderr[0]
    assert acceptance(1, err <= 3 * se, f"|y0 - 1| = {err:.4f}, 3 SE = {3 * se:.4f}")


def test_criterion_2_linear_driver(acceptance):
    paths = simulate_paths(brownian(1), np.zeros(1), [0.0], TimeGrid(0.0, 1.0, 256), 10_000, seed=102)
    cost = CostModel(1, zero_c(), lambda x: np.ones_like(x))
    y0, _ = conditional_g_expectation(paths, linear_decay(0.5), cost, BASIS)
    err = abs(y0[0] - np.exp(-0.5))
    assert acceptance(2, err <= 0.01, f"|y0 - e^-0.5| = {err:.2e}")


def test_criterion_3_feynman_kac(acceptance, heat_values):
    model, cost, drv = heat_problem()
    x0 = [[-2.0], [-1.0], [0.0], [1.0], [2.0]]
    rep = feynman_kac_crosscheck(heat_values, model, cost, drv, x0, 4000, BASIS, seed=103, grid_tol=2e-3)
    assert acceptance(3, rep.passed, f"max |phi - Y0| = {rep.max_discrepancy:.4f}")
    # the grid itself against the closed form
    for x in (-2.0, 0.0, 2.0):
        assert heat_values.at(0, [x])[0, 0] == pytest.approx(x * x + 0.5, abs=1e-3)


def _fd_gradient(cset, y, h):
    cols = []
    for e in np.eye(cset.dim):
        cols.append((distance_sq(cset, y + h * e) - distance_sq(cset, y - h * e)) / (2 * h))
    return np.stack(cols, axis=-1)


def test_criterion_4_projection_suite(acceptance):
    rng = np.random.default_rng(104)
    n, h = 10_000, 1e-6
    fails = {}
    for name, s in SETS.items():
        y, x = sample_points(rng, n, 2), sample_points(rng, n, 2)
        p = s._project(y)
        # Dykstra stops at its tolerance, the analytic projections are exact fixed points
        idem_tol = 1e-10 if name == "intersection" else 0.0
        idem = np.max(np.abs(s._project(p) - p), axis=1) > idem_tol
        lip = np.linalg.norm(p - s._project(x), axis=1) > np.linalg.norm(y - x, axis=1) * (1 + 1e-12) + 1e-12
        far = np.sqrt(distance_sq(s, y)) >= 10 * h
        g = 2.0 * (y - p)
        fd = _fd_gradient(s, y, h)
        rel = np.linalg.norm(fd - g, axis=1) / np.maximum(np.linalg.norm(g, axis=1), 1e-300)
        grad = far & (rel > 1e-6)
        fails[name] = int(idem.sum() + lip.sum() + grad.sum())
    total = sum(fails.values())
    assert acceptance(4, total == 0, f"failures per kind {fails}, {n} checks each"), fails


def test_criterion_5_hessian_bounds(acceptance):
    rng = np.random.default_rng(105)
    want, h = 1000, 1e-4
    worst, exceeded = [np.inf, -np.inf], []
    for name, s in SETS.items():
        kept, drawn = 0, 0
        while kept < want and drawn < 10 * want:
            y = sample_points(rng, 1, 2)[0]
            drawn += 1
            est = hessian_distance_sq(s, y, h)
            if not est.bounds_ok:
                continue
            kept += 1
            half = np.linalg.eigvalsh(0.5 * est.matrix)
            worst = [min(worst[0], half.min()), max(worst[1], half.max())]
        if kept < want:
            exceeded.append(name)
    ok = not exceeded and worst[0] >= -1e-3 and worst[1] <= 1 + 1e-3
    assert acceptance(5, ok, f"half-Hessian eigenvalues in [{worst[0]:.2e}, {worst[1]:.6f}], "
                             f"budget exceeded on {exceeded or 'none'}")


def test_criterion_6_mollifier_bound(acceptance):
    rng = np.random.default_rng(106)
    names = sorted(SETS)
    post, pre = 0, 0.0
    for i in range(1000):
        s = SETS[names[rng.integers(len(names))]]
        x = sample_points(rng, 1, 2)[0]
        delta = float(np.exp(rng.uniform(np.log(1e-3), np.log(2.0))))
        upper = (np.sqrt(distance_sq(s, x)) + delta) ** 2
        v = mollified_distance_sq(s, x, delta, n_quad=256, seed=i)
        post += not (0.0 <= v <= upper)
        raw = mollified_distance_sq(s, x, delta, n_quad=256, seed=i, clamp=False)
        pre = max(pre, raw - upper, -raw)
    ok = post == 0 and pre <= 1e-3
    assert acceptance(6, ok, f"post-clamp violations {post}, worst pre-clamp excess {max(pre, 0.0):.2e}")


def test_criterion_7_viability(acceptance):
    model = brownian(1)
    zcost = CostModel(1, zero_c(), lambda x: np.zeros_like(x))
    drv = linear_decay(1.0)
    # exterior of the orthant only: inside K every margin is zero
    cloud = SampleCloudSpec(t_range=(0.0, 1.0), x_lo=np.array([-2.0]), x_hi=np.array([2.0]),
                            y_lo=np.array([-10.0]), y_hi=np.array([-0.5]), z_lo=-2.0, z_hi=2.0,
                            n_samples=10_000)
    cond = check_condition_3_3(Orthant(1), drv, zcost, model, cloud, C=1.0, seed=107)
    paths = simulate_paths(model, np.zeros(1), [0.0], TimeGrid(0.0, 1.0, 64), 4000, seed=107)
    sol = solve_bsde(paths, drv, paths.x[:, -1] ** 2, BASIS)
    emp = empirical_viability(sol, Orthant(1), 5 * sol.residual_scale)

    push = Driver(1, lambda t, y, z, j: np.full(y.shape[0], -1.0), 0.0)
    wide = SampleCloudSpec((0.0, 1.0), np.array([-2.0]), np.array([2.0]), np.array([-2.0]), np.array([2.0]),
                           0.0, 0.0, n_samples=10_000)
    counter = check_condition_3_3(Orthant(1), push, zcost, model, wide, C=2.0, seed=107)
    ok = cond.passed and cond.worst_margin >= 0.1 and emp.passed and not counter.passed
    assert acceptance(7, ok, f"margin {cond.worst_margin:.3f}, empirical {emp.worst_margin:.2e}, "
                             f"push witness y = {counter.worst_witness['y'][0]:.3f}")


def _riccati_rk4(T=0.5, dt=1e-5, sigma=0.1):
    """Backward RK4 for k' = k^2 - 1, b' = -sigma^2 k with k(T) = 1, b(T) = 0."""
    def rhs(s):
        return np.array([s[0] ** 2 - 1.0, -sigma ** 2 * s[0]])
    n = int(round(T / dt))
    s = np.array([1.0, 0.0])
    ks = [s[0]]
    for _ in range(n):
        # integrating in reversed time tau = T - t flips the sign
        k1 = -rhs(s)
        k2 = -rhs(s + 0.5 * dt * k1)
        k3 = -rhs(s + 0.5 * dt * k2)
        k4 = -rhs(s + dt * k3)
        s = s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        ks.append(s[0])
    return np.array(ks[::-1]), s[1]


def test_criterion_8_lqr(acceptance, lqr_values):
    k_path, b0 = _riccati_rk4()
    exact = k_path[0] * 0.25 + b0
    phi = lqr_values.at(0, [0.5])[0, 0]
    rel = abs(phi - exact) / exact
    pol = extract_policy(lqr_values)
    rng = np.random.default_rng(108)
    spacing = 8.0 / 40
    worst = -np.inf
    for _ in range(200):
        t = rng.uniform(0.0, LQR_TIME.T - LQR_TIME.dt)
        x = rng.uniform(-2.0, 2.0)
        k = np.interp(t, np.linspace(0.0, LQR_TIME.T, k_path.size), k_path)
        u = pol(0, t, np.array([[x]]))[0, 0]
        worst = max(worst, abs(u + k * x) - (spacing + 0.05 * abs(k * x)))
    ok = rel <= 0.05 and worst <= 0.0
    assert acceptance(8, ok, f"phi(0,0.5) = {phi:.4f} vs {exact:.4f} ({rel:.1%}), gain slack {-worst:.3f}")


def test_criterion_9_dp_consistency(acceptance, heat_values, lqr_values):
    model, cost, drv = heat_problem()
    heat = dp_consistency(heat_values, extract_policy(heat_values), model, cost, drv, 100, [0.5], 4000,
                          BASIS, seed=109)
    model, cost, drv = lqr_problem()
    pol = extract_policy(lqr_values)
    neg = dataclasses.replace(pol, u_star=-pol.u_star)
    lqr = dp_consistency(lqr_values, neg, model, cost, drv, 100, [0.5], 4000, BASIS, seed=109)
    ok = heat.within(3.0) and lqr.gap[0] > 3 * lqr.std_err[0]
    assert acceptance(9, ok, f"heat gap {heat.gap[0]:+.4f} (allowed {heat.interp_error + 3 * heat.std_err[0]:.4f}), "
                             f"negated LQR gap {lqr.gap[0]:+.4f} vs 3 SE {3 * lqr.std_err[0]:.4f}")


def _payload_hashes(out):
    man = json.loads((out / "run_manifest.json").read_text())
    return {e["file"]: e["sha256"] for e in man["outputs"]}


def test_criterion_10_determinism(acceptance, tmp_path):
    codes = [run("all", "heat", out=tmp_path / "a", threads=1),
             run("all", "heat", out=tmp_path / "b", threads=1),
             run("all", "heat", out=tmp_path / "c", threads=8)]
    a, b, c = (_payload_hashes(tmp_path / s) for s in "abc")
    ok = codes == [0, 0, 0] and a == b == c and len(a) > 5
    assert acceptance(10, ok, f"{len(a)} payload files, repeat identical {a == b}, threads 1 vs 8 identical {a == c}")
