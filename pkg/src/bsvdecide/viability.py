"""Sampled checks of backward stochastic viability with respect to a convex set.

Three checks share one report type:

* ``check_condition_3_3`` samples the pointwise sufficient condition
  ``<y - P_K(y), G^(t, x, y, z sigma)> <= 1/4 <D^2 d_K^2(y) z sigma, z sigma> + C d_K^2(y)``;
* ``empirical_viability`` measures how far a simulated BSDE solution strays from K;
* ``grid_viability`` does the same for a PDE value grid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, ResampleBudgetExceeded
from .geometry import ConvexSet, _hessian_batch, _half_eig_bounds_ok

__all__ = [
    "SampleCloudSpec",
    "ViabilityReport",
    "check_condition_3_3",
    "minimal_constant",
    "empirical_viability",
    "grid_viability",
]


@dataclass
class SampleCloudSpec:
    """Bounded sampling boxes for ``(t, x, y, z)``; controls come from the model's mesh.

    ``z_lo``/``z_hi`` broadcast against the (n, d) shape of ``z``.
    """

    t_range: tuple
    x_lo: np.ndarray
    x_hi: np.ndarray
    y_lo: np.ndarray
    y_hi: np.ndarray
    z_lo: object = 0.0
    z_hi: object = 0.0
    n_samples: int = 1000

    def draw(self, rng: np.random.Generator, m: int, n: int, d: int, n_controls: int):
        t = rng.uniform(self.t_range[0], self.t_range[1], m)
        x = rng.uniform(np.broadcast_to(self.x_lo, (d,)), np.broadcast_to(self.x_hi, (d,)), (m, d))
        y = rng.uniform(np.broadcast_to(self.y_lo, (n,)), np.broadcast_to(self.y_hi, (n,)), (m, n))
        z = rng.uniform(np.broadcast_to(self.z_lo, (n, d)), np.broadcast_to(self.z_hi, (n, d)), (m, n, d))
        ui = rng.integers(0, n_controls, m)
        return t, x, y, z, ui


@dataclass
class ViabilityReport:
    kind: str
    n_samples: int
    worst_margin: float
    worst_witness: dict
    passed: bool
    tolerance: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable)

    def summary_line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.kind}: worst margin {self.worst_margin:.6g} "
                f"(tolerance {self.tolerance:.3g}, {self.n_samples} samples)")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj)}")


def _report(kind, n, margins, witness_fn, tolerance, extra=None) -> ViabilityReport:
    i = int(np.argmin(margins))
    worst = float(margins[i])
    return ViabilityReport(kind=kind, n_samples=int(n), worst_margin=worst, worst_witness=witness_fn(i),
                           passed=bool(worst >= -tolerance), tolerance=float(tolerance), extra=extra or {})


def _condition_terms(cset: ConvexSet, driver, cost, model, sampler: SampleCloudSpec, h, seed: int):
    """Sample the cloud and return the C-independent pieces of the margin."""
    n, d = cset.dim, model.dim_x
    if driver.dim_y != n or cost.dim_n != n:
        raise DimensionError(f"set dimension {n} does not match driver ({driver.dim_y}) / cost ({cost.dim_n})")
    mesh = model.control_set.points
    rng = np.random.default_rng(seed)
    want = int(sampler.n_samples)
    budget = 10 * want
    drawn = 0
    kept = []
    n_kept = 0
    while n_kept < want:
        if drawn >= budget:
            raise ResampleBudgetExceeded(
                f"only {n_kept} of {want} samples had a well-behaved Hessian after {drawn} draws")
        m = min(want - n_kept, budget - drawn)
        t, x, y, z, ui = sampler.draw(rng, m, n, d, len(mesh))
        drawn += m
        hstep = 1e-4 * (1.0 + np.linalg.norm(y, axis=1)) if h is None else np.full(m, float(h))
        hess = _hessian_batch(cset, y, hstep)
        _, ok = _half_eig_bounds_ok(hess, hstep)
        kept.append((t[ok], x[ok], y[ok], z[ok], ui[ok], hess[ok]))
        n_kept += int(ok.sum())
    t, x, y, z, ui, hess = (np.concatenate(parts)[:want] for parts in zip(*kept))

    proj = cset._project(y)
    resid = y - proj
    d2 = np.sum(resid ** 2, axis=1)
    lhs = np.empty(want)
    quad = np.empty(want)
    for i in range(want):
        xi, ui_ = x[i : i + 1], mesh[ui[i] : ui[i] + 1]
        zs = z[i] @ model.diffusion(t[i], xi, ui_)[0]
        ghat = cost.c(t[i], xi, ui_)[0] + driver.evaluate(t[i], y[i : i + 1], zs[None])[0]
        lhs[i] = resid[i] @ ghat
        quad[i] = 0.25 * np.trace(zs.T @ hess[i] @ zs)
    samples = {"t": t, "x": x, "y": y, "z": z, "u": mesh[ui]}
    return lhs, quad, d2, samples, drawn


def check_condition_3_3(cset: ConvexSet, driver, cost, model, sampler: SampleCloudSpec, C: float,
                        h: float | None = None, seed: int = 0, tolerance: float = 1e-10) -> ViabilityReport:
    """Sample the pointwise viability condition and report the worst margin.

    ``margin = 1/4 <D^2 d_K^2(y) z sigma, z sigma> + C d_K^2(y) - <y - P_K(y), G^(t, x, y, z sigma)>``.
    Samples whose Hessian estimate violates ``0 <= D^2 d_K^2 / 2 <= I`` are
    redrawn, up to ten times the requested sample count.
    """
    if not C > 0:
        raise ValueError("C must be positive")
    lhs, quad, d2, s, drawn = _condition_terms(cset, driver, cost, model, sampler, h, seed)
    margins = quad + C * d2 - lhs
    return _report("Condition33", len(margins), margins,
                   lambda i: {k: v[i] for k, v in s.items()} | {"margin": float(margins[i])},
                   tolerance, {"C": float(C), "draws": int(drawn), "min_margin_outside_K":
                               float(margins[d2 > 0].min()) if np.any(d2 > 0) else None})


def minimal_constant(cset: ConvexSet, driver, cost, model, sampler: SampleCloudSpec,
                     h: float | None = None, seed: int = 0, tolerance: float = 1e-10,
                     exponents=range(21)):
    """Smallest ``C`` in ``{2^0, ..., 2^20}`` for which the sampled condition holds, else ``None``."""
    lhs, quad, d2, _, _ = _condition_terms(cset, driver, cost, model, sampler, h, seed)
    for e in exponents:
        C = 2.0 ** e
        if np.min(quad + C * d2 - lhs) >= -tolerance:
            return C
    return None


def empirical_viability(solution, cset: ConvexSet, eps: float) -> ViabilityReport:
    """Largest distance from K over all paths and steps of a BSDE solution."""
    y = solution.y
    if y.shape[2] != cset.dim:
        raise DimensionError(f"solution has dimension {y.shape[2]}, set has {cset.dim}")
    flat = y.reshape(-1, cset.dim)
    dist = np.sqrt(np.sum((flat - cset._project(flat)) ** 2, axis=1))
    n_steps1 = y.shape[1]
    return _report("PathwiseBSVP", flat.shape[0], -dist,
                   lambda i: {"path": i // n_steps1, "step": i % n_steps1, "y": flat[i]}, eps)


def grid_viability(values, cset: ConvexSet, eps: float) -> ViabilityReport:
    """Largest distance from K over all nodes and time slices of a value grid."""
    phi = values.phi
    if phi.shape[2] != cset.dim:
        raise DimensionError(f"value grid has dimension {phi.shape[2]}, set has {cset.dim}")
    flat = phi.reshape(-1, cset.dim)
    dist = np.sqrt(np.sum((flat - cset._project(flat)) ** 2, axis=1))
    nodes = phi.shape[1]
    pts = values.space.points
    times = values.tgrid.times
    return _report("GridViability", flat.shape[0], -dist,
                   lambda i: {"step": i // nodes, "t": times[i // nodes], "node": i % nodes,
                              "x": pts[i % nodes], "phi": flat[i]}, eps)
