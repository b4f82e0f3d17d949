"""Closed convex sets with exact projections and squared-distance calculus.

Every set exposes a batched projection acting on the trailing axis, so
``project(K, a)`` accepts a single point of shape ``(n,)`` or a stack of
points of shape ``(N, n)``.  The squared distance ``d_K^2`` is convex and
differentiable with gradient ``2 (y - P_K(y))``; its Hessian exists almost
everywhere and is estimated here by central differences of that gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .errors import ConvergenceError, DimensionError, NonFiniteError

__all__ = [
    "ConvexSet",
    "Box",
    "Ball",
    "HalfSpace",
    "Orthant",
    "FullSpace",
    "Intersection",
    "HessianEstimate",
    "set_from_dict",
    "project",
    "distance_sq",
    "grad_distance_sq",
    "hessian_distance_sq",
    "mollified_distance_sq",
    "bump_kernel",
]

MEMBERSHIP_TOL = 1e-10
DYKSTRA_TOL = 1e-12
DYKSTRA_MAX_ITER = 10_000
_SLACK = 1e-14


class ConvexSet:
    """Base class: a nonempty closed convex subset of R^n."""

    dim: int

    def _project(self, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError

    def contains(self, a, tol: float = MEMBERSHIP_TOL):
        """Membership test, vectorized over leading axes."""
        a = _as_points(self, a)
        return np.linalg.norm(a - self._project(a), axis=-1) <= tol * np.maximum(
            1.0, np.abs(a).max(axis=-1)
        )

    def __eq__(self, other):
        return type(self) is type(other) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(repr(self.to_dict()))


def _vec(x, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape {arr.shape}")
    return arr


@dataclass(eq=False)
class Box(ConvexSet):
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = _vec(self.lo, "lo")
        self.hi = _vec(self.hi, "hi")
        if self.lo.shape != self.hi.shape:
            raise DimensionError("box bounds differ in length")
        if np.any(self.lo > self.hi):
            raise ValueError("box requires lo <= hi componentwise")
        self.dim = self.lo.size

    def _project(self, a):
        return np.clip(a, self.lo, self.hi)

    def to_dict(self):
        return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(eq=False)
class Ball(ConvexSet):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = _vec(self.center, "center")
        self.radius = float(self.radius)
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")
        self.dim = self.center.size

    def _project(self, a):
        v = a - self.center
        r = np.linalg.norm(v, axis=-1, keepdims=True)
        # slack of a few ulps keeps projected points fixed under re-projection
        outside = r > self.radius * (1.0 + _SLACK)
        return np.where(outside, self.center + v * (self.radius / np.where(outside, r, 1.0)), a)

    def to_dict(self):
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}


@dataclass(eq=False)
class HalfSpace(ConvexSet):
    """The set ``{y : <normal, y> <= offset}`` with a unit normal."""

    normal: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        self.normal = _vec(self.normal, "normal")
        self.offset = float(self.offset)
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-12:
            raise ValueError("half-space normal must have unit length")
        self.dim = self.normal.size

    def _project(self, a):
        excess = a @ self.normal - self.offset
        scale = _SLACK * (1.0 + np.abs(self.offset) + np.linalg.norm(a, axis=-1))
        return np.where((excess > scale)[..., None], a - excess[..., None] * self.normal, a)

    def to_dict(self):
        return {"kind": "halfspace", "normal": self.normal.tolist(), "offset": self.offset}


@dataclass(eq=False)
class Orthant(ConvexSet):
    """Nonnegative orthant ``[0, inf)^n``."""

    dim: int

    def __post_init__(self):
        self.dim = _positive_dim(self.dim)

    def _project(self, a):
        return np.maximum(a, 0.0)

    def to_dict(self):
        return {"kind": "orthant", "dim": self.dim}


@dataclass(eq=False)
class FullSpace(ConvexSet):
    dim: int

    def __post_init__(self):
        self.dim = _positive_dim(self.dim)

    def _project(self, a):
        return np.array(a, dtype=float, copy=True)

    def to_dict(self):
        return {"kind": "fullspace", "dim": self.dim}


@dataclass(eq=False)
class Intersection(ConvexSet):
    """Intersection of convex sets, projected with Dykstra's algorithm.

    Nonemptiness is checked on construction by projecting the origin.
    """

    sets: list = field(default_factory=list)
    tol: float = DYKSTRA_TOL
    max_iter: int = DYKSTRA_MAX_ITER

    def __post_init__(self):
        self.sets = list(self.sets)
        if not self.sets:
            raise ValueError("intersection needs at least one set")
        dims = {s.dim for s in self.sets}
        if len(dims) != 1:
            raise DimensionError(f"intersected sets have dimensions {sorted(dims)}")
        self.dim = dims.pop()
        try:
            self._project(np.zeros(self.dim))
        except ConvergenceError as exc:
            raise ConvergenceError(f"intersection appears to be empty: {exc}") from None

    def _project(self, a):
        a = np.asarray(a, dtype=float)
        flat = a.reshape(-1, self.dim)
        x = flat.copy()
        incr = [np.zeros_like(x) for _ in self.sets]
        scale = np.maximum(1.0, np.abs(flat).max(axis=1))
        active = np.arange(x.shape[0])
        for _ in range(self.max_iter):
            xa = x[active]
            start = xa.copy()
            for i, s in enumerate(self.sets):
                shifted = xa + incr[i][active]
                y = s._project(shifted)
                incr[i][active] = shifted - y
                xa = y
            x[active] = xa
            done = np.abs(xa - start).max(axis=1) <= self.tol * scale[active]
            active = active[~done]
            if active.size == 0:
                break
        else:
            raise ConvergenceError(
                f"Dykstra projections did not reach tol {self.tol} in {self.max_iter} iterations"
            )
        for s in self.sets:
            gap = np.linalg.norm(x - s._project(x), axis=1)
            if np.any(gap > MEMBERSHIP_TOL * scale):
                raise ConvergenceError(
                    f"projection limit lies outside a member set (gap {gap.max():.3g})"
                )
        return x.reshape(a.shape)

    def to_dict(self):
        return {"kind": "intersection", "sets": [s.to_dict() for s in self.sets]}


def _positive_dim(n) -> int:
    n = int(n)
    if n < 1:
        raise ValueError("dimension must be a positive integer")
    return n


_KINDS = {
    "box": lambda d: Box(d["lo"], d["hi"]),
    "ball": lambda d: Ball(d["center"], d["radius"]),
    "halfspace": lambda d: HalfSpace(d["normal"], d.get("offset", 0.0)),
    "orthant": lambda d: Orthant(d["dim"]),
    "fullspace": lambda d: FullSpace(d["dim"]),
    "intersection": lambda d: Intersection([set_from_dict(s) for s in d["sets"]]),
}

_KEYS = {
    "box": {"lo", "hi"},
    "ball": {"center", "radius"},
    "halfspace": {"normal", "offset"},
    "orthant": {"dim"},
    "fullspace": {"dim"},
    "intersection": {"sets"},
}


def set_from_dict(spec: dict) -> ConvexSet:
    """Build a set from a config fragment such as ``{"kind": "box", "lo": [0], "hi": [1]}``."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ValueError("convex set spec needs a 'kind' key")
    kind = spec["kind"]
    if kind not in _KINDS:
        raise ValueError(f"unknown convex set kind {kind!r}; expected one of {sorted(_KINDS)}")
    extra = set(spec) - _KEYS[kind] - {"kind"}
    if extra:
        raise ValueError(f"unexpected keys for {kind} set: {sorted(extra)}")
    return _KINDS[kind](spec)


def _as_points(cset: ConvexSet, a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1)
    if a.shape[-1] != cset.dim:
        raise DimensionError(f"point has dimension {a.shape[-1]}, set has {cset.dim}")
    return a


def project(cset: ConvexSet, a) -> np.ndarray:
    """Nearest point of ``cset`` to ``a``."""
    return cset._project(_as_points(cset, a))


def distance_sq(cset: ConvexSet, a):
    """Squared Euclidean distance to the set; a float for a single point."""
    a = _as_points(cset, a)
    d2 = np.sum((a - cset._project(a)) ** 2, axis=-1)
    return float(d2) if d2.ndim == 0 else d2


def grad_distance_sq(cset: ConvexSet, y) -> np.ndarray:
    """Gradient ``2 (y - P_K(y))`` of the squared distance."""
    y = _as_points(cset, y)
    return 2.0 * (y - cset._project(y))


@dataclass
class HessianEstimate:
    """Symmetrized finite-difference Hessian of ``d_K^2`` at ``at``.

    ``bounds_ok`` reports whether the eigenvalues of half the matrix lie in
    ``[-10 h, 1 + 10 h]``; it is false near points where ``d_K^2`` fails to
    be twice differentiable.
    """

    matrix: np.ndarray
    step: float
    at: np.ndarray
    eigenvalues: np.ndarray
    bounds_ok: bool


def _hessian_batch(cset: ConvexSet, y: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Central differences of the gradient for a stack ``y`` of shape (N, n)."""
    n = cset.dim
    eye = np.eye(n)
    hh = np.asarray(h, dtype=float).reshape(-1, 1, 1)
    plus = y[:, None, :] + hh * eye
    minus = y[:, None, :] - hh * eye
    gp = 2.0 * (plus - cset._project(plus))
    gm = 2.0 * (minus - cset._project(minus))
    # row i of cols holds d(grad)/dy_i
    cols = (gp - gm) / (2.0 * hh)
    return 0.5 * (cols + np.swapaxes(cols, 1, 2))


def _half_eig_bounds_ok(mats: np.ndarray, h) -> tuple[np.ndarray, np.ndarray]:
    eig = np.linalg.eigvalsh(0.5 * mats)
    tol = 10.0 * np.asarray(h, dtype=float).reshape(-1)
    ok = (eig.min(axis=1) >= -tol) & (eig.max(axis=1) <= 1.0 + tol)
    return eig, ok


def hessian_distance_sq(cset: ConvexSet, y, h: float = 1e-4) -> HessianEstimate:
    """Finite-difference Hessian of the squared distance at a single point."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    y = _as_points(cset, y)
    if y.ndim != 1:
        raise DimensionError("hessian_distance_sq takes a single point")
    mat = _hessian_batch(cset, y[None, :], np.array([h]))[0]
    if not np.all(np.isfinite(mat)):
        raise NonFiniteError("non-finite difference quotient in Hessian", location=tuple(y))
    eig, ok = _half_eig_bounds_ok(mat[None], [h])
    return HessianEstimate(matrix=mat, step=float(h), at=y.copy(), eigenvalues=eig[0] * 2.0,
                           bounds_ok=bool(ok[0]))


def bump_kernel(r):
    """Unnormalized C-infinity bump ``exp(-1 / (1 - r^2))`` supported on ``r < 1``."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def mollified_distance_sq(cset: ConvexSet, x, delta: float, n_quad: int = 1024,
                          seed: int = 0, clamp: bool = True) -> float:
    """Quasi-Monte-Carlo estimate of ``d_K^2`` convolved with a bump of radius ``delta``.

    Nodes are a scrambled Halton sequence mapped uniformly onto the unit ball
    and weighted by the bump kernel, so the estimate is a convex combination
    of ``d_K^2`` values over the ``delta``-ball around ``x``.  With ``clamp``
    the result is forced into ``[0, (d_K(x) + delta)^2]``.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    if n_quad < 1:
        raise ValueError("n_quad must be at least 1")
    x = _as_points(cset, x)
    if x.ndim != 1:
        raise DimensionError("mollified_distance_sq takes a single point")
    n = cset.dim
    u = qmc.Halton(d=n + 1, scramble=True, seed=seed).random(n_quad)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    g = ndtri(u[:, :n])
    direction = g / np.linalg.norm(g, axis=1, keepdims=True)
    radius = u[:, n] ** (1.0 / n)
    w = bump_kernel(radius)
    pts = x - delta * radius[:, None] * direction
    d2 = np.sum((pts - cset._project(pts)) ** 2, axis=1)
    if w.sum() > 0:
        est = float(np.dot(w, d2) / w.sum())
    else:
        est = float(np.sum((x - cset._project(x)) ** 2))
    if clamp:
        upper = (np.sqrt(np.sum((x - cset._project(x)) ** 2)) + delta) ** 2
        est = float(min(max(est, 0.0), upper))
    return est


def sample_points(rng: np.random.Generator, n: int, dim: int, scale: float = 5.0) -> np.ndarray:
    """Random test points: a mix of Gaussian and heavy-tailed draws."""
    return scale * rng.standard_normal((n, dim)) * rng.exponential(1.0, (n, 1))

