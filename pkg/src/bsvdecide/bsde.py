"""Regression Monte Carlo for multi-dimensional BSDEs with diagonal drivers.

The backward equation ``Y_t = xi + int_t^T G^(s, X_s, Y_s, Z_s) ds - int_t^T Z_s dB_s``
is discretized on the forward grid of a :class:`~bsvdecide.sde.PathBundle`:

    Z_k = E[Y_{k+1} dW_k^T | X_k] / dt
    Y_k = E[Y_{k+1} | X_k] + dt * G^(t_k, X_k, Y_k, Z_k)

with conditional expectations replaced by ridge least squares on a basis of
``X_k`` and the implicit ``Y_k`` resolved by Picard iteration.  The driver
``G^ = c + G`` folds the running cost into the BSDE driver; component ``j`` of
``G`` only sees row ``j`` of ``Z``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import _io
from .errors import DimensionError, NonFiniteError, SingularRegressionError
from .sde import PathBundle, simulate_paths

__all__ = [
    "Driver",
    "CostModel",
    "RegressionBasis",
    "BsdeSolution",
    "ConsistencyReport",
    "accumulated_cost",
    "solve_bsde",
    "conditional_g_expectation",
    "consistency_check",
    "save_solution",
]

MAX_CONDITION = 1e12


@dataclass
class Driver:
    """Vector driver ``G`` with diagonal structure.

    ``g(t, y, z_row, j)`` returns component ``j`` for a batch: ``y`` has shape
    (N, n), ``z_row`` is row ``j`` of ``Z`` with shape (N, d), result (N,).
    """

    dim_y: int
    g: Callable
    lipschitz_const: float = 0.0
    name: str = "custom"

    def evaluate(self, t: float, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        """All components at once; ``z`` has shape (N, n, d)."""
        out = np.empty(y.shape)
        for j in range(self.dim_y):
            out[:, j] = self.g(t, y, z[:, j, :], j)
        return out

    def check_lipschitz(self, dim_z: int, n_probe: int = 1000, seed: int = 0,
                        scale: float = 5.0, tol: float = 1e-6) -> tuple[float, bool]:
        """Largest sampled ratio ``|G(y,z) - G(y',z')| / (|y-y'| + ||z-z'||)``."""
        rng = np.random.default_rng(seed)
        n = self.dim_y
        t = rng.uniform(0.0, 1.0)
        y1, y2 = scale * rng.standard_normal((2, n_probe, n))
        z1, z2 = scale * rng.standard_normal((2, n_probe, n, dim_z))
        diff = np.linalg.norm(self.evaluate(t, y1, z1) - self.evaluate(t, y2, z2), axis=1)
        den = np.linalg.norm(y1 - y2, axis=1) + np.linalg.norm((z1 - z2).reshape(n_probe, -1), axis=1)
        ratio = float(np.max(diff / den))
        return ratio, ratio <= self.lipschitz_const * (1.0 + tol) + tol


@dataclass
class CostModel:
    """Running cost rate ``c(t, x, u) -> (N, n)`` and terminal cost ``psi(x) -> (N, n)``."""

    dim_n: int
    c: Callable
    psi: Callable
    name: str = "custom"


@dataclass(frozen=True)
class RegressionBasis:
    """``kind`` is ``"polynomial"`` (total ``degree``) or ``"local"`` (``n_cells`` per dimension, affine per cell)."""

    kind: str = "polynomial"
    degree: int = 2
    n_cells: int = 4
    ridge: float = 1e-10

    def __post_init__(self):
        if self.kind not in ("polynomial", "local"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0 or self.n_cells < 1 or self.ridge < 0:
            raise ValueError("basis requires degree >= 0, n_cells >= 1, ridge >= 0")

    def to_dict(self):
        return {"kind": self.kind, "degree": self.degree, "n_cells": self.n_cells, "ridge": self.ridge}


def _standardize(X: np.ndarray):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    active = sd > 1e-12 * (1.0 + np.abs(mu))
    return (X[:, active] - mu[active]) / sd[active]


def _monomials(Zs: np.ndarray, degree: int) -> np.ndarray:
    N, m = Zs.shape
    cols = [np.ones(N)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(m), deg):
            cols.append(np.prod(Zs[:, combo], axis=1))
    return np.column_stack(cols)


def _ridge_fit(A: np.ndarray, B: np.ndarray, ridge: float):
    """Least squares with an unpenalized intercept in column 0."""
    N, p = A.shape
    gram = A.T @ A / N
    pen = np.full(p, ridge)
    pen[0] = 0.0
    gram[np.diag_indices(p)] += pen
    cond = float(np.linalg.cond(gram))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        return None, cond
    coef = np.linalg.solve(gram, A.T @ B / N)
    return A @ coef, cond


def regress(basis: RegressionBasis, X: np.ndarray, B: np.ndarray, step: int | None = None):
    """Fitted values of ``B`` (N, m) on the basis of ``X`` (N, d) and the condition number."""
    Zs = _standardize(X)
    if basis.kind == "polynomial" or Zs.shape[1] == 0:
        A = _monomials(Zs, basis.degree if basis.kind == "polynomial" else 1)
        fitted, cond = _ridge_fit(A, B, basis.ridge)
        if fitted is None:
            raise SingularRegressionError(
                f"regression at step {step} has condition number {cond:.3g} > {MAX_CONDITION:g}",
                step=step, condition=cond)
        return fitted, cond
    m = Zs.shape[1]
    nc = basis.n_cells
    lo, hi = Zs.min(axis=0), Zs.max(axis=0)
    width = np.where(hi > lo, (hi - lo) / nc, 1.0)
    idx = np.clip(((Zs - lo) / width).astype(int), 0, nc - 1)
    cell = np.ravel_multi_index(tuple(idx.T), (nc,) * m)
    fitted = np.empty(B.shape)
    worst = 1.0
    for c in np.unique(cell):
        rows = np.flatnonzero(cell == c)
        if rows.size < 2 * (m + 1):
            fitted[rows] = B[rows].mean(axis=0)
            continue
        Zc = Zs[rows]
        A = np.column_stack([np.ones(rows.size), Zc - Zc.mean(axis=0)])
        f, cond = _ridge_fit(A, B[rows], basis.ridge)
        if f is None:
            f, cond = np.broadcast_to(B[rows].mean(axis=0), B[rows].shape), 1.0
        fitted[rows] = f
        worst = max(worst, cond)
    return fitted, worst


@dataclass
class BsdeSolution:
    y: np.ndarray
    z: np.ndarray
    condition: np.ndarray
    residual: np.ndarray
    source: dict
    y0_stderr: np.ndarray = field(default=None)

    @property
    def y0(self) -> np.ndarray:
        return self.y[:, 0].mean(axis=0)

    @property
    def y0_spread(self) -> np.ndarray:
        return self.y[:, 0].std(axis=0)

    @property
    def residual_scale(self) -> float:
        return float(self.residual.max()) if self.residual.size else 0.0

    def report_rows(self) -> np.ndarray:
        K, n = self.residual.shape
        steps = np.repeat(np.arange(K), n)
        comps = np.tile(np.arange(n), K)
        return np.column_stack([steps, comps, np.repeat(self.condition, n), self.residual.ravel()])


def accumulated_cost(paths: PathBundle, cost: CostModel) -> np.ndarray:
    """Left-endpoint Riemann sum of ``c`` along each path plus ``psi(X_T)``."""
    grid = paths.grid
    t = grid.times
    total = np.zeros((paths.n_paths, cost.dim_n))
    for k in range(grid.n_steps):
        total += cost.c(t[k], paths.x[:, k], paths.controls[:, k]) * grid.dt
    total += cost.psi(paths.x[:, -1])
    bad = ~np.isfinite(total)
    if bad.any():
        raise NonFiniteError("accumulated cost is non-finite", location=tuple(np.argwhere(bad)[0]))
    return total


def solve_bsde(paths: PathBundle, driver: Driver, terminal: np.ndarray,
               basis: RegressionBasis = RegressionBasis(), picard_iters: int = 3,
               running_cost: CostModel | None = None) -> BsdeSolution:
    """Backward regression sweep along ``paths``.

    With ``running_cost`` the driver becomes ``c + G`` and ``terminal`` should
    be ``psi(X_T)``; without it, pass the full accumulated cost as terminal
    data to solve for the cost-shifted process instead.
    """
    grid = paths.grid
    N, K, d = paths.n_paths, grid.n_steps, paths.dim_x
    n = driver.dim_y
    terminal = np.asarray(terminal, dtype=float)
    if terminal.ndim == 1 and n == 1:
        terminal = terminal[:, None]
    if terminal.shape != (N, n):
        raise DimensionError(f"terminal data has shape {terminal.shape}, expected {(N, n)}")
    if picard_iters < 1:
        raise ValueError("picard_iters must be >= 1")
    dt = grid.dt
    if driver.lipschitz_const * dt >= 1.0:
        raise ValueError(
            f"Picard step is not a contraction: lipschitz_const * dt = {driver.lipschitz_const * dt:.3g} >= 1"
        )
    if running_cost is not None and running_cost.dim_n != n:
        raise DimensionError("running cost and driver dimensions differ")
    t = grid.times
    y = np.empty((N, K + 1, n))
    z = np.empty((N, K, n, d))
    y[:, K] = terminal
    cond = np.empty(K)
    resid = np.empty((K, n))
    drift_sum = np.zeros((N, n))
    for k in range(K - 1, -1, -1):
        xk = paths.x[:, k]
        ynext = y[:, k + 1]
        targets = np.concatenate(
            [ynext, (ynext[:, :, None] * paths.dW[:, k, None, :]).reshape(N, n * d) / dt], axis=1)
        fitted, cond[k] = regress(basis, xk, targets, step=k)
        ey = fitted[:, :n]
        zk = fitted[:, n:].reshape(N, n, d)
        cterm = 0.0 if running_cost is None else running_cost.c(t[k], xk, paths.controls[:, k])
        yk = ey
        for _ in range(picard_iters):
            gk = cterm + driver.evaluate(t[k], yk, zk)
            yk = ey + dt * gk
        if not (np.all(np.isfinite(yk)) and np.all(np.isfinite(zk))):
            p = int(np.argwhere(~np.isfinite(yk))[0][0]) if not np.all(np.isfinite(yk)) else None
            raise NonFiniteError("BSDE solution became non-finite", location=(p, k))
        y[:, k] = yk
        z[:, k] = zk
        drift_sum += dt * (cterm + driver.evaluate(t[k], yk, zk))
        resid[k] = np.sqrt(np.mean((ynext - ey) ** 2, axis=0))
    stderr = (terminal + drift_sum).std(axis=0) / np.sqrt(N)
    return BsdeSolution(y=y, z=z, condition=cond, residual=resid, source=paths.identity(),
                        y0_stderr=stderr)


def conditional_g_expectation(paths: PathBundle, driver: Driver, cost: CostModel,
                              basis: RegressionBasis = RegressionBasis(), picard_iters: int = 3,
                              form: str = "folded"):
    """Time-``t0`` value of the BSDE with the vector cost as terminal data.

    ``form="folded"`` puts ``c`` in the driver with terminal ``psi(X_T)``;
    ``form="accumulated"`` uses the whole accumulated cost as terminal data
    and the bare driver.  Returns ``(y0, solution)`` where ``y0`` is the
    cross-path mean of ``Y_0``.
    """
    if form == "folded":
        sol = solve_bsde(paths, driver, cost.psi(paths.x[:, -1]), basis, picard_iters, running_cost=cost)
    elif form == "accumulated":
        sol = solve_bsde(paths, driver, accumulated_cost(paths, cost), basis, picard_iters)
    else:
        raise ValueError(f"unknown form {form!r}")
    return sol.y0, sol


@dataclass
class ConsistencyReport:
    r: int
    max_abs: float
    mean_abs: float
    residual_scale: float
    restarted: bool


def _shift_control(control, r: int):
    if control is None:
        return None
    if callable(control):
        return lambda k, t, x: control(k + r, t, x)
    arr = np.asarray(control, dtype=float)
    if arr.ndim == 2:
        return arr[r:]
    if arr.ndim == 3:
        return arr[:, r:]
    return arr


def consistency_check(paths: PathBundle, driver: Driver, cost: CostModel,
                      basis: RegressionBasis = RegressionBasis(), r: int = 1,
                      picard_iters: int = 3, seed: int | None = None) -> ConsistencyReport:
    """Compare ``Y_r`` of a full solve against a solve started afresh at ``t_r``.

    When the bundle remembers its model, the restart re-simulates the
    continuation from each path's time-``r`` state with independent
    increments; otherwise the recorded continuation is reused.
    """
    K = paths.grid.n_steps
    if not 0 < r < K:
        raise ValueError(f"intermediate index must satisfy 0 < r < {K}")
    _, full = conditional_g_expectation(paths, driver, cost, basis, picard_iters)
    sub_grid = paths.grid.sub(r)
    restarted = paths.model is not None and paths.control is not None
    if restarted:
        restart_seed = (paths.seed + 0x9E3779B9) if seed is None else seed
        sub = simulate_paths(paths.model, _shift_control(paths.control, r), paths.x[:, r], sub_grid,
                             paths.n_paths, restart_seed)
    else:
        sub = PathBundle(grid=sub_grid, x=paths.x[:, r:], dW=paths.dW[:, r:],
                         controls=paths.controls[:, r:], seed=paths.seed)
    _, part = conditional_g_expectation(sub, driver, cost, basis, picard_iters)
    gap = np.abs(full.y[:, r] - part.y[:, 0])
    return ConsistencyReport(r=r, max_abs=float(gap.max()), mean_abs=float(gap.mean()),
                             residual_scale=max(full.residual_scale, part.residual_scale),
                             restarted=restarted)


def save_solution(solution: BsdeSolution, directory, paths_manifest: str = "paths_manifest.json") -> Path:
    """Write Y, Z, and the per-step regression report next to a path manifest."""
    directory = Path(directory)
    N, K1, n = solution.y.shape
    d = solution.z.shape[3]
    _io.write_table(directory / "bsde_y.csv", ["path", "step"] + [f"y{j}" for j in range(n)],
                    _io.indexed_rows(solution.y))
    _io.write_table(directory / "bsde_z.csv",
                    ["path", "step"] + [f"z{j}_{i}" for j in range(n) for i in range(d)],
                    _io.indexed_rows(solution.z))
    _io.write_table(directory / "regression_report.csv",
                    ["step", "component", "condition_number", "residual"], solution.report_rows())
    manifest = {"source": solution.source, "paths_manifest": paths_manifest,
                "y0": solution.y0.tolist(), "y0_stderr": solution.y0_stderr.tolist(),
                "y0_spread": solution.y0_spread.tolist(),
                "files": ["bsde_y.csv", "bsde_z.csv", "regression_report.csv"]}
    return _io.write_json(directory / "bsde_manifest.json", manifest)
