"""Feedback policies from value grids, closed-loop cost evaluation, Pareto comparison."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _io
from .bsde import conditional_g_expectation, solve_bsde
from .errors import DimensionError, ModeMismatch
from .hjb import (PerComponent, Scalarized, SpaceGrid, ValueGrid, _brackets, _coefficients,
                  _derivatives, _Operators, _select)
from .sde import TimeGrid, simulate_paths

__all__ = [
    "Policy",
    "CostOutcome",
    "Dominance",
    "DomainExitWarning",
    "extract_policy",
    "closed_loop_cost",
    "pareto_compare",
    "dp_consistency",
    "save_policy",
]


class DomainExitWarning(UserWarning):
    pass


@dataclass
class Policy:
    """Feedback control ``u*(t_k, x)`` stored on the space-time grid.

    Calling ``policy(k, t, x)`` looks up the slice for time ``t`` and returns
    one mesh control per row of ``x``.  ``lookup="nearest"`` takes the
    nearest node; ``"linear"`` interpolates and snaps back to the mesh.
    States outside the grid are clamped; the count of such rows from the
    last call is kept in ``last_exits``.
    """

    space: SpaceGrid
    tgrid: TimeGrid
    u_star: np.ndarray
    mesh: np.ndarray
    lookup: str = "nearest"
    last_exits: int = field(default=0, repr=False)

    def slice_index(self, t: float) -> int:
        k = int(np.floor((t - self.tgrid.t0) / self.tgrid.dt + 1e-9))
        return min(max(k, 0), self.tgrid.n_steps)

    def __call__(self, k, t, x):
        x = np.atleast_2d(x)
        ks = self.slice_index(t)
        idx, outside = self.space.nearest(x)
        self.last_exits = int(outside.sum())
        if self.lookup == "nearest":
            return self.u_star[ks, idx]
        u = self.space.interpolate(self.u_star[ks], x)
        dist = np.sum((u[:, None, :] - self.mesh[None]) ** 2, axis=2)
        return self.mesh[np.argmin(dist, axis=1)]


@dataclass
class CostOutcome:
    j_vector: np.ndarray
    std_err: np.ndarray
    n_paths: int
    seed: int
    domain_exit_frac: float = 0.0

    @property
    def reliable(self) -> bool:
        return self.domain_exit_frac <= 0.01

    def csv_header(self) -> str:
        n = len(self.j_vector)
        return ",".join([f"J{j}" for j in range(n)] + [f"se{j}" for j in range(n)] + ["seed", "n_paths"])

    def csv_row(self) -> str:
        vals = [f"{v:.17g}" for v in self.j_vector] + [f"{v:.17g}" for v in self.std_err]
        return ",".join(vals + [str(self.seed), str(self.n_paths)])


class Dominance(enum.Enum):
    A_DOMINATES = "ADominates"
    B_DOMINATES = "BDominates"
    INCOMPARABLE = "Incomparable"
    EQUAL = "Equal"


def _reminimize(values: ValueGrid, mode) -> np.ndarray:
    if values.problem is None:
        raise ModeMismatch(f"value grid was solved in mode {values.mode}; cannot recompute {mode} "
                           "without the model, cost, and driver")
    model, cost, driver = values.problem
    ops = _Operators(values.space)
    t = values.tgrid.times
    K = values.tgrid.n_steps
    mesh = values.controls.points
    out = np.empty(values.phi.shape[:2], dtype=int)
    for k in range(K + 1):
        # explicit sweeps chose the control on [t_k, t_k+1] from slice k+1
        src = k + 1 if (values.scheme == "explicit" and k < K) else k
        f, sig, c = _coefficients(model, cost, t[src], values.space.points, mesh)
        br = _brackets(t[src], values.phi[src], _derivatives(ops, values.phi[src]), f, sig, c, driver)
        _, idx = _select(br, mode)
        out[k] = idx[:, 0] if isinstance(mode, Scalarized) else idx[:, mode.j]
    return out


def extract_policy(values: ValueGrid, mode=PerComponent(0), lookup: str = "nearest") -> Policy:
    """Materialize the minimizing control field for ``mode`` as a :class:`Policy`."""
    stored = values.mode
    if isinstance(mode, PerComponent):
        if not 0 <= mode.j < values.dim_n:
            raise DimensionError(f"component {mode.j} out of range for {values.dim_n} components")
        if isinstance(stored, PerComponent):
            idx = values.argmin_idx[:, :, mode.j]
        elif values.dim_n == 1:
            idx = values.argmin_idx[:, :, 0]
        else:
            idx = _reminimize(values, mode)
    elif isinstance(mode, Scalarized):
        if isinstance(stored, Scalarized) and stored.weights == mode.weights:
            idx = values.argmin_idx[:, :, 0]
        elif values.dim_n == 1 and len(mode.weights) == 1 and mode.weights[0] > 0:
            idx = values.argmin_idx[:, :, 0]
        else:
            idx = _reminimize(values, mode)
    else:
        raise ModeMismatch(f"unknown policy mode {mode!r}")
    if lookup not in ("nearest", "linear"):
        raise ValueError(f"unknown lookup {lookup!r}")
    mesh = values.controls.points
    return Policy(space=values.space, tgrid=values.tgrid, u_star=mesh[idx], mesh=mesh, lookup=lookup)


def closed_loop_cost(policy: Policy, model, cost, driver, x0, n_paths: int, basis, seed: int,
                     picard_iters: int = 3) -> CostOutcome:
    """Simulate under the feedback policy and return the BSDE value ``Y_0`` with its standard error."""
    paths = simulate_paths(model, policy, x0, policy.tgrid, n_paths, seed)
    y0, sol = conditional_g_expectation(paths, driver, cost, basis, picard_iters)
    frac = paths.domain_exits / (n_paths * policy.tgrid.n_steps)
    if frac > 0:
        warnings.warn(f"{frac:.2%} of path-steps left the policy grid"
                      + (" (run flagged unreliable)" if frac > 0.01 else ""), DomainExitWarning, stacklevel=2)
    return CostOutcome(j_vector=np.asarray(y0), std_err=np.asarray(sol.y0_stderr), n_paths=int(n_paths),
                       seed=int(seed), domain_exit_frac=float(frac))


def pareto_compare(a: CostOutcome, b: CostOutcome, k_sigma: float = 2.0) -> Dominance:
    """Componentwise comparison where differences within ``k_sigma`` combined SE count as ties."""
    ja, jb = np.asarray(a.j_vector, dtype=float), np.asarray(b.j_vector, dtype=float)
    if ja.shape != jb.shape:
        raise DimensionError(f"cost vectors have shapes {ja.shape} and {jb.shape}")
    thr = k_sigma * np.sqrt(np.asarray(a.std_err) ** 2 + np.asarray(b.std_err) ** 2)
    diff = ja - jb
    less = np.any(diff < -thr)
    greater = np.any(diff > thr)
    if less and greater:
        return Dominance.INCOMPARABLE
    if less:
        return Dominance.A_DOMINATES
    if greater:
        return Dominance.B_DOMINATES
    return Dominance.EQUAL


@dataclass
class DpReport:
    r: int
    phi0: np.ndarray
    estimate: np.ndarray
    gap: np.ndarray
    std_err: np.ndarray
    interp_error: float

    def within(self, k_sigma: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.gap) <= self.interp_error + k_sigma * self.std_err))


def dp_consistency(values: ValueGrid, policy: Policy, model, cost, driver, r: int, x0, n_paths: int,
                   basis, seed: int, picard_iters: int = 3) -> DpReport:
    """Signed gap between the one-stage BSDE value with terminal ``phi(t_r, X_r)`` and ``phi(t0, x0)``.

    A positive gap means the policy does worse than the value function predicts.
    """
    K = values.tgrid.n_steps
    if not 0 < r <= K:
        raise ValueError(f"intermediate index must satisfy 0 < r <= {K}")
    grid = values.tgrid.sub(0, r)
    paths = simulate_paths(model, policy, x0, grid, n_paths, seed)
    terminal = values.at(r, paths.x[:, -1])
    sol = solve_bsde(paths, driver, terminal, basis, picard_iters, running_cost=cost)
    phi0 = values.at(0, np.atleast_1d(np.asarray(x0, dtype=float)))[0]
    ops = _Operators(values.space)
    curv = max(float(np.abs(op @ values.phi[r]).max()) for op in ops.sec)
    interp_error = float(np.sum(values.space.spacing ** 2) / 8.0 * curv)
    return DpReport(r=r, phi0=phi0, estimate=sol.y0, gap=sol.y0 - phi0, std_err=sol.y0_stderr,
                    interp_error=interp_error)


def save_policy(policy: Policy, directory) -> Path:
    directory = Path(directory)
    K1, Nn, du = policy.u_star.shape
    d = policy.space.dim
    steps = np.repeat(np.arange(K1), Nn)
    rows = np.column_stack([steps, policy.tgrid.times[steps], np.tile(policy.space.points, (K1, 1)),
                            policy.u_star.reshape(K1 * Nn, du)])
    _io.write_table(directory / "policy_u.csv",
                    ["step", "t"] + [f"x{i}" for i in range(d)] + [f"u{i}" for i in range(du)], rows)
    manifest = {"space": policy.space.to_dict(), "time": policy.tgrid.to_dict(), "lookup": policy.lookup,
                "control_mesh": policy.mesh.tolist(), "files": ["policy_u.csv"]}
    return _io.write_json(directory / "policy_manifest.json", manifest)
