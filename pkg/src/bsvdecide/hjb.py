"""Finite-difference solver for the semilinear parabolic HJB system.

For each component ``j`` the value ``phi_j`` solves, backward from
``phi(T, .) = psi``,

    d phi_j/dt + min_u { 1/2 tr(a D^2 phi_j) + f . D phi_j + c_j + G_j(t, phi, D phi_j^T sigma) } = 0,

with ``a = sigma sigma^T``, on a truncated box.  The bracket is minimized
by exhaustive search over the control mesh.  First derivatives in the
convection term are upwinded by the sign of the candidate drift; the box
boundary is closed by linear extrapolation (zero second difference).
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import _io
from .errors import CflViolation, DimensionError, FixedPointDivergence, NonFiniteError
from .sde import ControlSet, TimeGrid

logger = logging.getLogger(__name__)

__all__ = [
    "SpaceGrid",
    "ValueGrid",
    "PerComponent",
    "Scalarized",
    "hamiltonian",
    "solve_system",
    "residual_check",
    "feynman_kac_crosscheck",
    "save_values",
]


@dataclass(frozen=True)
class PerComponent:
    """Minimize each component's bracket separately; ``j`` picks the component for policies."""

    j: int = 0


@dataclass(frozen=True)
class Scalarized:
    """Minimize ``sum_j w_j * bracket_j`` with one shared control per node."""

    weights: tuple

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))


class SpaceGrid:
    """Uniform tensor grid on the box ``[lo, hi]`` with C-ordered node numbering."""

    def __init__(self, lo, hi, nodes_per_dim):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        nodes = np.broadcast_to(np.asarray(nodes_per_dim, dtype=int), self.lo.shape)
        if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
            raise ValueError("space grid requires lo < hi componentwise")
        if np.any(nodes < 3):
            raise ValueError("space grid needs at least 3 nodes per dimension")
        self.shape = tuple(int(m) for m in nodes)
        self.axes = [np.linspace(a, b, m) for a, b, m in zip(self.lo, self.hi, self.shape)]
        self.spacing = (self.hi - self.lo) / (np.array(self.shape) - 1)
        mesh = np.meshgrid(*self.axes, indexing="ij")
        self.points = np.column_stack([m.ravel() for m in mesh])

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def n_nodes(self) -> int:
        return self.points.shape[0]

    def boundary_mask(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(self.dim, -1)
        last = (np.array(self.shape) - 1)[:, None]
        return np.any((idx == 0) | (idx == last), axis=0)

    def inner_mask(self, frac: float) -> np.ndarray:
        """Nodes at least ``frac`` of the domain width away from every face."""
        w = self.hi - self.lo
        return np.all((self.points >= self.lo + frac * w - 1e-12) & (self.points <= self.hi - frac * w + 1e-12), axis=1)

    def nearest(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest node index for each row of ``x`` and a mask of rows outside the box."""
        x = np.atleast_2d(x)
        outside = np.any((x < self.lo - 1e-12) | (x > self.hi + 1e-12), axis=1)
        ii = np.rint((x - self.lo) / self.spacing).astype(int)
        ii = np.clip(ii, 0, np.array(self.shape) - 1)
        return np.ravel_multi_index(tuple(ii.T), self.shape), outside

    def interpolate(self, values: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of node ``values`` (n_nodes, ...) at points ``x``, clamped to the box."""
        x = np.clip(np.atleast_2d(x), self.lo, self.hi)
        vals = values.reshape(self.shape + values.shape[1:])
        s = (x - self.lo) / self.spacing
        i0 = np.clip(np.floor(s).astype(int), 0, np.array(self.shape) - 2)
        frac = s - i0
        out = 0.0
        for corner in itertools.product((0, 1), repeat=self.dim):
            c = np.array(corner)
            w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
            idx = tuple((i0 + c).T)
            out = out + w.reshape((-1,) + (1,) * (vals.ndim - self.dim)) * vals[idx]
        return out

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "nodes_per_dim": list(self.shape)}


def _diff_1d(m: int, h: float):
    """Forward, backward, central, and second-difference matrices with extrapolated ghosts."""
    e = np.ones(m)
    fwd = sp.diags([-e, e[:-1]], [0, 1], shape=(m, m)).tolil()
    fwd[m - 1, m - 2], fwd[m - 1, m - 1] = -1.0, 1.0
    bwd = sp.diags([e, -e[1:]], [0, -1], shape=(m, m)).tolil()
    bwd[0, 0], bwd[0, 1] = -1.0, 1.0
    cen = sp.diags([-0.5 * e[1:], 0.5 * e[:-1]], [-1, 1], shape=(m, m)).tolil()
    cen[0, 0], cen[0, 1] = -1.0, 1.0
    cen[m - 1, m - 2], cen[m - 1, m - 1] = -1.0, 1.0
    sec = sp.diags([e[1:], -2.0 * e, e[:-1]], [-1, 0, 1], shape=(m, m)).tolil()
    sec[0, :] = 0.0
    sec[m - 1, :] = 0.0
    return (fwd.tocsr() / h, bwd.tocsr() / h, cen.tocsr() / h, sec.tocsr() / h ** 2)


class _Operators:
    """Sparse difference operators on the flattened grid."""

    def __init__(self, space: SpaceGrid):
        d = space.dim
        eyes = [sp.identity(m, format="csr") for m in space.shape]
        self.fwd, self.bwd, self.cen, self.sec = [], [], [], []
        for i in range(d):
            mats = _diff_1d(space.shape[i], space.spacing[i])
            for store, mat in zip((self.fwd, self.bwd, self.cen, self.sec), mats):
                full = sp.identity(1, format="csr")
                for k in range(d):
                    full = sp.kron(full, mat if k == i else eyes[k], format="csr")
                store.append(full)
        self.mixed = {(i, l): (self.cen[i] @ self.cen[l]).tocsr()
                      for i in range(d) for l in range(i + 1, d)}


@dataclass
class ValueGrid:
    """Value function samples ``phi[k, node, j]`` with the minimizing control indices.

    ``argmin_idx[k, node, c]`` indexes the control mesh; ``c`` runs over
    components in per-component mode and has length one when scalarized.
    Slice ``k < n_steps`` holds the control used on ``[t_k, t_{k+1}]``.
    """

    space: SpaceGrid
    tgrid: TimeGrid
    phi: np.ndarray
    argmin_idx: np.ndarray
    controls: ControlSet
    scheme: str
    mode: Any
    problem: Any = field(default=None, repr=False)

    @property
    def dim_n(self) -> int:
        return self.phi.shape[2]

    @property
    def argmin_u(self) -> np.ndarray:
        return self.controls.points[self.argmin_idx]

    def at(self, k: int, x) -> np.ndarray:
        """Interpolated ``phi(t_k, x)`` for points ``x`` of shape (M, d)."""
        return self.space.interpolate(self.phi[k], np.atleast_2d(x))


def _coefficients(model, cost, t, X, controls: np.ndarray):
    """Drift, diffusion, and running cost for every (control, node) pair."""
    M, Nn = controls.shape[0], X.shape[0]
    Xr = np.repeat(X[None], M, axis=0).reshape(M * Nn, -1)
    Ur = np.repeat(controls, Nn, axis=0)
    f = np.asarray(model.drift(t, Xr, Ur), dtype=float).reshape(M, Nn, -1)
    sig = np.asarray(model.diffusion(t, Xr, Ur), dtype=float).reshape(M, Nn, X.shape[1], X.shape[1])
    c = np.asarray(cost.c(t, Xr, Ur), dtype=float).reshape(M, Nn, -1)
    return f, sig, c


def _derivatives(ops: _Operators, phi: np.ndarray):
    return {
        "fwd": [op @ phi for op in ops.fwd],
        "bwd": [op @ phi for op in ops.bwd],
        "cen": np.stack([op @ phi for op in ops.cen], axis=-1),
        "sec": [op @ phi for op in ops.sec],
        "mixed": {k: op @ phi for k, op in ops.mixed.items()},
    }


def _brackets(t, phi, der, f, sig, c, driver) -> np.ndarray:
    """Hamiltonian bracket for every candidate control: shape (M, Nn, n)."""
    M, Nn, d = f.shape
    a = sig @ np.swapaxes(sig, -1, -2)
    out = np.empty((M, Nn, phi.shape[1]))
    for m in range(M):
        h = c[m].copy()
        for i in range(d):
            fp = np.maximum(f[m, :, i], 0.0)[:, None]
            fm = np.minimum(f[m, :, i], 0.0)[:, None]
            h += fp * der["fwd"][i] + fm * der["bwd"][i] + 0.5 * a[m, :, i, i][:, None] * der["sec"][i]
        for (i, l), mix in der["mixed"].items():
            h += a[m, :, i, l][:, None] * mix
        # row j of Z = (D phi_j)^T sigma
        z = np.einsum("pji,pik->pjk", der["cen"], sig[m])
        h += driver.evaluate(t, phi, z)
        out[m] = h
    return out


def _select(br: np.ndarray, mode):
    """Minimum over controls and the argmin (lowest index on ties)."""
    if isinstance(mode, Scalarized):
        w = np.asarray(mode.weights)
        if w.size != br.shape[2]:
            raise DimensionError(f"{w.size} weights for {br.shape[2]} components")
        idx = np.argmin(br @ w, axis=0)
        val = np.take_along_axis(br, idx[None, :, None], axis=0)[0]
        return val, idx[:, None]
    idx = np.argmin(br, axis=0)
    val = np.take_along_axis(br, idx[None], axis=0)[0]
    return val, idx


def hamiltonian(j: int, t: float, x, u, phi_vec, grad_j, hess_j, model, cost, driver) -> float:
    """Pointwise bracket ``1/2 tr(a hess_j) + f . grad_j + c_j + G_j(t, phi, grad_j^T sigma)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))[None]
    u = np.atleast_1d(np.asarray(u, dtype=float))[None]
    phi_vec = np.atleast_1d(np.asarray(phi_vec, dtype=float))[None]
    grad_j = np.atleast_1d(np.asarray(grad_j, dtype=float))
    hess_j = np.atleast_2d(np.asarray(hess_j, dtype=float))
    sig = np.asarray(model.diffusion(t, x, u), dtype=float)[0]
    f = np.asarray(model.drift(t, x, u), dtype=float)[0]
    c = np.asarray(cost.c(t, x, u), dtype=float)[0]
    val = 0.5 * np.trace(sig @ sig.T @ hess_j) + f @ grad_j + c[j] + driver.g(t, phi_vec, (grad_j @ sig)[None], j)[0]
    val = float(val)
    if not np.isfinite(val):
        raise NonFiniteError("hamiltonian is non-finite", location=(j, t))
    return val


def _cfl_limit(f, sig, space: SpaceGrid) -> float:
    a = sig @ np.swapaxes(sig, -1, -2)
    h = space.spacing
    d = space.dim
    diag = np.diagonal(a, axis1=-2, axis2=-1)
    rate = (diag / h ** 2).sum(-1) + (np.abs(f) / h).sum(-1)
    parabolic = d * np.linalg.norm(a, ord=2, axis=(-2, -1)) / h.min() ** 2
    return 1.0 / max(rate.max(), parabolic.max(), 1e-300)


def solve_system(model, cost, driver, space: SpaceGrid, tgrid: TimeGrid, scheme: str = "explicit",
                 mode=PerComponent(), fp_tol: float = 1e-10, fp_max_iter: int = 50) -> ValueGrid:
    """Backward sweep from ``phi(T) = psi`` to ``t0``.

    ``scheme="explicit"`` steps ``phi_k = phi_{k+1} + dt * min_u bracket(phi_{k+1})`` and
    requires the time step to respect the monotonicity bound.  ``"semi-implicit"``
    treats diffusion and convection implicitly with the minimizing control
    lagged by one fixed-point iteration.
    """
    if space.dim != model.dim_x:
        raise DimensionError(f"space grid has dimension {space.dim}, model has {model.dim_x}")
    if scheme not in ("explicit", "semi-implicit"):
        raise ValueError(f"unknown scheme {scheme!r}")
    X = space.points
    Nn = space.n_nodes
    n = cost.dim_n
    if driver.dim_y != n:
        raise DimensionError("driver and cost dimensions differ")
    mesh = model.control_set.points
    t = tgrid.times
    dt = tgrid.dt
    K = tgrid.n_steps
    ops = _Operators(space)

    phi = np.empty((K + 1, Nn, n))
    width = 1 if isinstance(mode, Scalarized) else n
    argmin = np.empty((K + 1, Nn, width), dtype=int)
    psi = np.asarray(cost.psi(X), dtype=float).reshape(Nn, n)
    phi[K] = psi

    coeffs = {}

    def coeff(k):
        if k not in coeffs:
            coeffs.clear()
            coeffs[k] = _coefficients(model, cost, t[k], X, mesh)
        return coeffs[k]

    if scheme == "explicit":
        for k in sorted({0, K // 2, K}):
            f, sig, _ = coeff(k)
            limit = _cfl_limit(f, sig, space)
            if dt > limit * (1 + 1e-12):
                raise CflViolation(f"explicit step dt={dt:.4g} exceeds stability limit {limit:.4g}; "
                                   f"use at least {int(np.ceil((tgrid.T - tgrid.t0) / limit))} steps")

    f, sig, c = coeff(K)
    _, argmin[K] = _select(_brackets(t[K], phi[K], _derivatives(ops, phi[K]), f, sig, c, driver), mode)

    for k in range(K - 1, -1, -1):
        if scheme == "explicit":
            f, sig, c = coeff(k + 1)
            br = _brackets(t[k + 1], phi[k + 1], _derivatives(ops, phi[k + 1]), f, sig, c, driver)
            val, argmin[k] = _select(br, mode)
            phi[k] = phi[k + 1] + dt * val
        else:
            phi[k], argmin[k] = _semi_implicit_step(ops, space, t[k], dt, phi[k + 1], coeff(k), driver,
                                                    mode, fp_tol, fp_max_iter, k)
        bad = ~np.isfinite(phi[k])
        if bad.any():
            node = int(np.argwhere(bad)[0][0])
            raise NonFiniteError("value function became non-finite", location=(k, node, tuple(X[node])))
    return ValueGrid(space=space, tgrid=tgrid, phi=phi, argmin_idx=argmin, controls=model.control_set,
                     scheme=scheme, mode=mode, problem=(model, cost, driver))


def _semi_implicit_step(ops, space, tk, dt, phi_next, coeffs, driver, mode, tol, max_iter, k):
    f, sig, c = coeffs
    a = sig @ np.swapaxes(sig, -1, -2)
    Nn, n = phi_next.shape
    d = space.dim
    rows = np.arange(Nn)
    eye = sp.identity(Nn, format="csc")
    cur = phi_next.copy()
    changes = []
    for _ in range(max_iter):
        der = _derivatives(ops, cur)
        _, idx = _select(_brackets(tk, cur, der, f, sig, c, driver), mode)
        new = np.empty_like(cur)
        for j in range(n):
            m = idx[:, 0 if idx.shape[1] == 1 else j]
            fj, aj, sj = f[m, rows], a[m, rows], sig[m, rows]
            L = sp.csr_matrix((Nn, Nn))
            for i in range(d):
                L = (L + sp.diags(np.maximum(fj[:, i], 0.0)) @ ops.fwd[i]
                     + sp.diags(np.minimum(fj[:, i], 0.0)) @ ops.bwd[i]
                     + sp.diags(0.5 * aj[:, i, i]) @ ops.sec[i])
            for (i, l), mix in ops.mixed.items():
                L = L + sp.diags(aj[:, i, l]) @ mix
            z = np.einsum("pji,pik->pjk", der["cen"], sj)
            explicit = c[m, rows, j] + driver.g(tk, cur, z[:, j, :], j)
            new[:, j] = splu((eye - dt * L).tocsc()).solve(phi_next[:, j] + dt * explicit)
        change = float(np.max(np.abs(new - cur)))
        cur = new
        if not np.isfinite(change):
            raise FixedPointDivergence(f"semi-implicit iteration became non-finite at step {k}")
        changes.append(change)
        if change <= tol:
            break
    else:
        if len(changes) > 1 and changes[-1] > changes[0]:
            raise FixedPointDivergence(
                f"semi-implicit iteration diverged at step {k}: change {changes[0]:.3g} -> {changes[-1]:.3g}")
        logger.warning("semi-implicit step %d stopped at change %.3g after %d iterations", k, changes[-1], max_iter)
    der = _derivatives(ops, cur)
    _, idx = _select(_brackets(tk, cur, der, f, sig, c, driver), mode)
    return cur, idx


@dataclass
class ResidualReport:
    max_abs: float
    mean_abs: float
    n_samples: int
    worst: dict


def residual_check(values: ValueGrid, model, cost, driver, sample_nodes: int = 200, seed: int = 0,
                   inner_frac: float = 0.1) -> ResidualReport:
    """Interior PDE residual ``(phi_{k+1} - phi_k)/dt + min_u bracket(t_k, phi_k)``.

    Samples ``sample_nodes`` (step, node) pairs among nodes at least
    ``inner_frac`` of the domain width from the boundary.
    """
    space, tgrid = values.space, values.tgrid
    ops = _Operators(space)
    rng = np.random.default_rng(seed)
    inner = np.flatnonzero(space.inner_mask(inner_frac) & ~space.boundary_mask())
    K = tgrid.n_steps
    steps = rng.integers(0, K, sample_nodes)
    nodes = rng.choice(inner, sample_nodes)
    mode = values.mode
    t = tgrid.times
    res = np.empty(sample_nodes)
    comp = np.zeros(sample_nodes, dtype=int)
    for k in np.unique(steps):
        sel = np.flatnonzero(steps == k)
        f, sig, c = _coefficients(model, cost, t[k], space.points, model.control_set.points)
        val, _ = _select(_brackets(t[k], values.phi[k], _derivatives(ops, values.phi[k]), f, sig, c, driver), mode)
        r = (values.phi[k + 1] - values.phi[k]) / tgrid.dt + val
        jj = np.argmax(np.abs(r[nodes[sel]]), axis=1)
        res[sel] = np.abs(r[nodes[sel], jj])
        comp[sel] = jj
    i = int(np.argmax(res))
    return ResidualReport(max_abs=float(res.max()), mean_abs=float(res.mean()), n_samples=sample_nodes,
                          worst={"step": int(steps[i]), "node": int(nodes[i]), "component": int(comp[i]),
                                 "x": space.points[nodes[i]].tolist(), "residual": float(res[i])})


@dataclass
class CrossCheckReport:
    points: list
    max_discrepancy: float
    passed: bool


def feynman_kac_crosscheck(values: ValueGrid, model, cost, driver, x0_set, n_paths: int, basis,
                           seed: int = 0, grid_tol: float = 2e-3, picard_iters: int = 3) -> CrossCheckReport:
    """Compare ``phi(t0, x0)`` with the BSDE value under the extracted feedback policy.

    Each point passes when ``|phi - Y_0| <= 3 SE + grid_tol``.
    """
    from .decision import closed_loop_cost, extract_policy

    space = values.space
    x0_set = np.atleast_2d(np.asarray(x0_set, dtype=float))
    w = space.hi - space.lo
    if np.any(x0_set < space.lo + 0.1 * w) or np.any(x0_set > space.hi - 0.1 * w):
        raise ValueError("cross-check points must stay 10% of the domain width inside the grid")
    if isinstance(values.mode, Scalarized):
        modes = [(values.mode, list(range(values.dim_n)))]
    else:
        modes = [(PerComponent(j), [j]) for j in range(values.dim_n)]
    points = []
    for p, x0 in enumerate(x0_set):
        phi0 = values.at(0, x0)[0]
        for mode, comps in modes:
            policy = extract_policy(values, mode)
            out = closed_loop_cost(policy, model, cost, driver, x0, n_paths, basis, seed + p,
                                   picard_iters=picard_iters)
            for j in comps:
                gap = abs(float(phi0[j] - out.j_vector[j]))
                tol = 3.0 * float(out.std_err[j]) + grid_tol
                points.append({"x0": x0.tolist(), "component": j, "phi": float(phi0[j]),
                               "y0": float(out.j_vector[j]), "std_err": float(out.std_err[j]),
                               "discrepancy": gap, "tolerance": tol, "passed": gap <= tol})
    worst = max(pt["discrepancy"] for pt in points)
    return CrossCheckReport(points=points, max_discrepancy=worst, passed=all(pt["passed"] for pt in points))


def save_values(values: ValueGrid, directory) -> Path:
    """One plot-ready ``(step, t, x..., phi_j)`` CSV per component, the argmin field, and a manifest."""
    directory = Path(directory)
    K1, Nn, n = values.phi.shape
    d = values.space.dim
    t = values.tgrid.times
    steps = np.repeat(np.arange(K1), Nn)
    base = np.column_stack([steps, t[steps], np.tile(values.space.points, (K1, 1))])
    xcols = [f"x{i}" for i in range(d)]
    files = []
    for j in range(n):
        name = f"phi_{j}.csv"
        _io.write_table(directory / name, ["step", "t"] + xcols + [f"phi_{j}"],
                        np.column_stack([base, values.phi[:, :, j].ravel()]))
        files.append(name)
    width = values.argmin_idx.shape[2]
    _io.write_table(directory / "argmin_u.csv", ["step", "t"] + xcols + [f"index_{c}" for c in range(width)],
                    np.column_stack([base, values.argmin_idx.reshape(K1 * Nn, width)]))
    files.append("argmin_u.csv")
    mode = values.mode
    manifest = {
        "space": values.space.to_dict(), "time": values.tgrid.to_dict(), "scheme": values.scheme,
        "mode": {"kind": "scalarized", "weights": list(mode.weights)} if isinstance(mode, Scalarized)
        else {"kind": "per_component", "component": mode.j},
        "control_mesh": values.controls.points.tolist(), "dim_n": n, "files": files,
    }
    return _io.write_json(directory / "values_manifest.json", manifest)
