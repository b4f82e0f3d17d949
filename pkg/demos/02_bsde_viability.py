import numpy as np

from bsvdecide import (ControlSet, CostModel, DiffusionModel, Driver, Orthant, RegressionBasis, SampleCloudSpec,
                       TimeGrid, check_condition_3_3, conditional_g_expectation, empirical_viability, simulate_paths,
                       solve_bsde)

spacer = "_" * 60

sigma = lambda t, x, u: np.ones((x.shape[0], 1, 1))
bm = DiffusionModel(1, lambda t, x, u: np.zeros_like(x), sigma, ControlSet.mesh([[0.0]]), name="bm")
grid = TimeGrid(0.0, 1.0, 128)
paths = simulate_paths(bm, np.zeros(1), [0.0], grid, 10_000, seed=1)
print("\nSimulated", paths.n_paths, "Brownian paths on", grid.n_steps, "steps")
print("sample mean and variance of X_T:", paths.x[:, -1, 0].mean().round(4), paths.x[:, -1, 0].var().round(4))

print(spacer)

basis = RegressionBasis("polynomial", degree=2)
zero = Driver(1, lambda t, y, z, j: np.zeros(y.shape[0]))
square = CostModel(1, lambda t, x, u: np.zeros((x.shape[0], 1)), lambda x: x ** 2)

print("\nWith a zero driver the backward equation is a plain conditional expectation.")
y0, sol = conditional_g_expectation(paths, zero, square, basis)
print(f"Y_0 for xi = X_T^2: {y0[0]:.4f} +/- {sol.y0_stderr[0]:.4f}   (exact 1)")

print("\nA linear driver -r y discounts the terminal value:")
ones = CostModel(1, square.c, lambda x: np.ones_like(x))
for r in (0.25, 0.5, 1.0):
    decay = Driver(1, lambda t, y, z, j, r=r: -r * y[:, 0], r)
    y0, _ = conditional_g_expectation(paths, decay, ones, basis)
    print(f"r = {r:<5} Y_0 = {y0[0]:.5f}   exp(-r) = {np.exp(-r):.5f}")

print(spacer)

print("\nViability asks whether Y stays in a convex set K. Take K = [0, inf).")
cloud = SampleCloudSpec((0.0, 1.0), np.array([-2.0]), np.array([2.0]), np.array([-5.0]), np.array([-0.5]),
                        -1.0, 1.0, n_samples=5000)
decay = Driver(1, lambda t, y, z, j: -y[:, 0], 1.0, "decay")
rep = check_condition_3_3(Orthant(1), decay, square, bm, cloud, C=1.0, seed=2)
print(rep.summary_line())

sol = solve_bsde(paths, decay, paths.x[:, -1] ** 2, basis)
print(empirical_viability(sol, Orthant(1), 5 * sol.residual_scale).summary_line())

print("\nA driver that keeps pushing down breaks the condition near the boundary of K:")
push = Driver(1, lambda t, y, z, j: np.full(y.shape[0], -1.0), 0.0, "push")
near = SampleCloudSpec((0.0, 1.0), np.array([-1.0]), np.array([1.0]), np.array([-2.0]), np.array([2.0]),
                       0.0, 0.0, n_samples=5000)
rep = check_condition_3_3(Orthant(1), push, square, bm, near, C=2.0, seed=3)
print(rep.summary_line())
print("witness y =", np.round(rep.worst_witness["y"], 3), "(analytic -1/(2C) = -0.25)")

sol = solve_bsde(paths, push, np.zeros((paths.n_paths, 1)), basis)
print("and the solved Y leaves K:", empirical_viability(sol, Orthant(1), 1e-3).summary_line())
