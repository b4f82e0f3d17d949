"""Controlled forward diffusion: grids, control sets, seeded Euler-Maruyama paths.

Coefficient callables are vectorized over paths:

* ``drift(t, x, u)`` maps ``x`` of shape (N, d) and ``u`` of shape (N, du) to (N, d);
* ``diffusion(t, x, u)`` returns (N, d, d).

Brownian increments come from a counter-based generator keyed by
``(seed, path)``, so path ``p`` always sees the same noise no matter how
many paths are drawn or how the work is split across threads.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import _io
from ._parallel import run_chunked
from .errors import DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

__all__ = [
    "TimeGrid",
    "ControlSet",
    "DiffusionModel",
    "PathBundle",
    "GrowthReport",
    "brownian_increments",
    "simulate_paths",
    "check_growth",
    "save_bundle",
    "load_bundle",
]

_KEY_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.t0 < self.T:
            raise ValueError(f"time grid needs t0 < T, got [{self.t0}, {self.T}]")
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be positive")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def sub(self, start: int, stop: int | None = None) -> "TimeGrid":
        """Grid restricted to indices ``start..stop`` (inclusive)."""
        stop = self.n_steps if stop is None else stop
        t = self.times
        return TimeGrid(float(t[start]), float(t[stop]), stop - start)

    def to_dict(self):
        return {"t0": self.t0, "T": self.T, "n_steps": self.n_steps}


@dataclass
class ControlSet:
    """Compact control set, represented by a finite mesh of points.

    ``kind="box"`` builds the tensor mesh ``linspace(lo, hi, mesh_per_dim)``.
    """

    kind: str
    points: np.ndarray = None
    lo: np.ndarray = None
    hi: np.ndarray = None
    mesh_per_dim: tuple = None

    def __post_init__(self):
        if self.kind == "mesh":
            pts = np.asarray(self.points, dtype=float)
            if pts.ndim == 1:
                pts = pts[:, None]
        elif self.kind == "box":
            lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
            hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
            if lo.shape != hi.shape or np.any(lo > hi):
                raise ValueError("control box requires matching bounds with lo <= hi")
            m = np.broadcast_to(np.asarray(self.mesh_per_dim, dtype=int), lo.shape)
            if np.any(m < 1):
                raise ValueError("mesh_per_dim must be positive")
            axes = [np.linspace(a, b, k) for a, b, k in zip(lo, hi, m)]
            pts = np.array(list(itertools.product(*axes)), dtype=float)
            self.lo, self.hi, self.mesh_per_dim = lo, hi, tuple(int(k) for k in m)
        else:
            raise ValueError(f"unknown control set kind {self.kind!r}")
        if pts.size == 0:
            raise ValueError("control set must be nonempty")
        if not np.all(np.isfinite(pts)):
            raise ValueError("control mesh must be finite")
        self.points = pts

    @classmethod
    def mesh(cls, points) -> "ControlSet":
        return cls("mesh", points=points)

    @classmethod
    def box(cls, lo, hi, mesh_per_dim) -> "ControlSet":
        return cls("box", lo=lo, hi=hi, mesh_per_dim=mesh_per_dim)

    @property
    def dim_u(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]

    def to_dict(self):
        if self.kind == "box":
            return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist(),
                    "mesh_per_dim": list(self.mesh_per_dim)}
        return {"kind": "mesh", "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ControlSet":
        if d.get("kind") == "box":
            return cls.box(d["lo"], d["hi"], d["mesh_per_dim"])
        return cls.mesh(d["points"])


@dataclass
class DiffusionModel:
    dim_x: int
    drift: Callable
    diffusion: Callable
    control_set: ControlSet
    lipschitz_hint: float = 0.0
    ellipticity_floor: float | None = 1e-10
    name: str = "custom"

    @property
    def dim_u(self) -> int:
        return self.control_set.dim_u

    def check_ellipticity(self, t: float, x: np.ndarray, u: np.ndarray) -> None:
        """Raise if the least eigenvalue of ``sigma sigma^T`` drops below the floor."""
        if self.ellipticity_floor is None:
            return
        sig = self.diffusion(t, x, u)
        lam = np.linalg.eigvalsh(sig @ np.swapaxes(sig, 1, 2)).min()
        if lam < self.ellipticity_floor:
            raise ValueError(
                f"model {self.name!r}: least eigenvalue of sigma sigma^T is {lam:.3g}, "
                f"below the ellipticity floor {self.ellipticity_floor:.3g} at t={t:.4g}"
            )


@dataclass
class PathBundle:
    grid: TimeGrid
    x: np.ndarray
    dW: np.ndarray
    controls: np.ndarray
    seed: int
    model: Any = field(default=None, repr=False, compare=False)
    control: Any = field(default=None, repr=False, compare=False)
    domain_exits: int = 0

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    @property
    def dim_x(self) -> int:
        return self.x.shape[2]

    def identity(self) -> dict:
        return {"seed": self.seed, "grid": self.grid.to_dict(), "n_paths": self.n_paths}


def brownian_increments(grid: TimeGrid, n_paths: int, dim: int, seed: int,
                        n_workers: int | None = None) -> np.ndarray:
    """Normal(0, dt) increments of shape (n_paths, n_steps, dim).

    Path ``p`` draws from a Philox stream keyed by ``(seed, p)``.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    out = np.empty((n_paths, grid.n_steps, dim))
    sqdt = np.sqrt(grid.dt)
    key0 = int(seed) & _KEY_MASK

    def fill(lo, hi):
        for p in range(lo, hi):
            gen = np.random.Generator(np.random.Philox(key=[key0, p]))
            out[p] = gen.standard_normal((grid.n_steps, dim))

    run_chunked(fill, n_paths, n_workers)
    out *= sqdt
    return out


def _increment_gate(dW: np.ndarray, dt: float) -> None:
    """Sanity gate on the moments of the increments (skipped for tiny samples)."""
    n = dW.shape[0] * dW.shape[1]
    if n < 5000:
        return
    z = dW.reshape(n, -1) / np.sqrt(dt)
    mean = z.mean(axis=0)
    var = z.var(axis=0)
    if np.any(np.abs(mean) > 5.0 / np.sqrt(n)) or np.any(np.abs(var - 1.0) > 0.1):
        raise ValueError(f"Brownian increments failed moment gate: mean {mean}, var/dt {var}")


def _control_source(control, model: DiffusionModel, n_paths: int, n_steps: int):
    """Normalize a control source to ``fn(k, t, x) -> (N, du)``."""
    du = model.dim_u
    if callable(control):
        return control
    arr = np.asarray(control, dtype=float)
    if arr.ndim == 0 and du == 1:
        arr = arr.reshape(1)
    if arr.ndim == 1:
        if arr.size != du:
            raise DimensionError(f"constant control has size {arr.size}, expected {du}")
        const = np.broadcast_to(arr, (n_paths, du))
        return lambda k, t, x: const
    if arr.ndim == 2:
        if arr.shape != (n_steps, du):
            raise DimensionError(f"open-loop control must have shape {(n_steps, du)}")
        return lambda k, t, x: np.broadcast_to(arr[k], (x.shape[0], du))
    if arr.ndim == 3:
        if arr.shape != (n_paths, n_steps, du):
            raise DimensionError(f"per-path control must have shape {(n_paths, n_steps, du)}")
        return lambda k, t, x: arr[:, k]
    raise DimensionError(f"cannot interpret control of shape {arr.shape}")


def simulate_paths(model: DiffusionModel, control, x0, grid: TimeGrid, n_paths: int,
                   seed: int, dW: np.ndarray | None = None,
                   n_workers: int | None = None) -> PathBundle:
    """Euler-Maruyama paths ``X_{k+1} = X_k + f dt + sigma dW_k``.

    ``control`` is a constant vector, an open-loop array (n_steps, du) or
    (n_paths, n_steps, du), or a feedback callable ``(k, t, x) -> u``
    such as a :class:`bsvdecide.decision.Policy`.  ``x0`` may be a single
    state or one state per path.  Pre-drawn increments can be passed in
    ``dW`` to reuse a driver across runs.
    """
    d = model.dim_x
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        x0 = x0.reshape(1)
    if x0.shape[-1] != d or x0.ndim > 2 or (x0.ndim == 2 and x0.shape[0] != n_paths):
        raise DimensionError(f"initial state shape {x0.shape} incompatible with dim_x={d}")
    if dW is None:
        dW = brownian_increments(grid, n_paths, d, seed, n_workers=n_workers)
        _increment_gate(dW, grid.dt)
    elif dW.shape != (n_paths, grid.n_steps, d):
        raise DimensionError(f"dW has shape {dW.shape}, expected {(n_paths, grid.n_steps, d)}")
    source = _control_source(control, model, n_paths, grid.n_steps)

    t = grid.times
    dt = grid.dt
    x = np.empty((n_paths, grid.n_steps + 1, d))
    x[:, 0] = x0
    controls = np.empty((n_paths, grid.n_steps, model.dim_u))
    check_at = set(np.linspace(0, grid.n_steps - 1, min(grid.n_steps, 8)).astype(int).tolist())
    exits = 0
    for k in range(grid.n_steps):
        xk = x[:, k]
        u = np.asarray(source(k, t[k], xk), dtype=float)
        if u.shape != (n_paths, model.dim_u):
            u = np.broadcast_to(u, (n_paths, model.dim_u))
        exits += int(getattr(source, "last_exits", 0))
        controls[:, k] = u
        if k in check_at:
            rows = slice(0, min(n_paths, 32))
            model.check_ellipticity(t[k], xk[rows], u[rows])
        sig = model.diffusion(t[k], xk, u)
        x[:, k + 1] = xk + model.drift(t[k], xk, u) * dt + np.einsum("pij,pj->pi", sig, dW[:, k])
        bad = ~np.isfinite(x[:, k + 1])
        if bad.any():
            p = int(np.argwhere(bad)[0][0])
            raise NonFiniteError("state became non-finite", location=(p, k + 1))
    if exits:
        logger.warning("%d path-steps left the policy domain and were clamped", exits)
    return PathBundle(grid=grid, x=x, dW=dW, controls=controls, seed=int(seed),
                      model=model, control=control, domain_exits=exits)


@dataclass
class GrowthReport:
    ratio: float
    passes: bool
    C: float
    worst_index: int


def check_growth(model: DiffusionModel, cost, cloud, p: int, C: float) -> GrowthReport:
    """Largest value of ``(|f| + |sigma| + |c| + |Psi|) / (1 + |x|^p + |u|)`` over a cloud.

    ``cloud`` is a triple ``(t, x, u)`` of arrays with shapes (M,), (M, d), (M, du).
    ``cost`` provides ``c(t, x, u)`` and ``psi(x)``; norms are Euclidean
    (Frobenius for ``sigma``).
    """
    t, x, u = (np.asarray(a, dtype=float) for a in cloud)
    if x.ndim == 1:
        x = x[:, None]
    if u.ndim == 1:
        u = u[:, None]
    if t.size == 0:
        raise ValueError("growth check needs a nonempty cloud")
    num = np.empty(t.size)
    for i in range(t.size):
        xi, ui = x[i : i + 1], u[i : i + 1]
        num[i] = (
            np.linalg.norm(model.drift(t[i], xi, ui))
            + np.linalg.norm(model.diffusion(t[i], xi, ui))
            + np.linalg.norm(cost.c(t[i], xi, ui))
            + np.linalg.norm(cost.psi(xi))
        )
    den = 1.0 + np.linalg.norm(x, axis=1) ** p + np.linalg.norm(u, axis=1)
    ratios = num / den
    i = int(np.argmax(ratios))
    return GrowthReport(ratio=float(ratios[i]), passes=bool(ratios[i] <= C), C=float(C), worst_index=i)


def save_bundle(bundle: PathBundle, directory) -> Path:
    """Write x, dW, controls as CSV tables plus ``paths_manifest.json``."""
    directory = Path(directory)
    d, du = bundle.dim_x, bundle.controls.shape[2]
    files = {
        "x": _io.write_table(directory / "paths_x.csv", ["path", "step"] + [f"x{i}" for i in range(d)],
                             _io.indexed_rows(bundle.x)).name,
        "dW": _io.write_table(directory / "paths_dW.csv", ["path", "step"] + [f"dW{i}" for i in range(d)],
                              _io.indexed_rows(bundle.dW)).name,
        "controls": _io.write_table(directory / "paths_controls.csv",
                                    ["path", "step"] + [f"u{i}" for i in range(du)],
                                    _io.indexed_rows(bundle.controls)).name,
    }
    manifest = {"grid": bundle.grid.to_dict(), "seed": bundle.seed, "n_paths": bundle.n_paths,
                "dim_x": d, "dim_u": du, "domain_exits": bundle.domain_exits, "files": files}
    return _io.write_json(directory / "paths_manifest.json", manifest)


def load_bundle(directory) -> PathBundle:
    directory = Path(directory)
    m = _io.read_json(directory / "paths_manifest.json")
    grid = TimeGrid(**m["grid"])
    n, k = m["n_paths"], grid.n_steps

    def load(name, steps, width):
        _, data = _io.read_table(directory / m["files"][name])
        return data[:, 2:].reshape(n, steps, width)

    return PathBundle(grid=grid, x=load("x", k + 1, m["dim_x"]), dW=load("dW", k, m["dim_x"]),
                      controls=load("controls", k, m["dim_u"]), seed=m["seed"],
                      domain_exits=m.get("domain_exits", 0))
