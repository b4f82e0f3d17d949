"""Named presets for models, costs, drivers, and convex sets.

Configs refer to coefficients by preset name plus a parameter dict, so no
expression parsing is ever needed.  Every preset builds at its defaults.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .bsde import CostModel, Driver
from .errors import ConfigError
from .geometry import set_from_dict
from .sde import ControlSet, DiffusionModel

__all__ = ["Preset", "catalog_list", "build", "preset", "CATEGORIES"]

CATEGORIES = ("cost", "driver", "model", "set")


@dataclass(frozen=True)
class Preset:
    category: str
    name: str
    params: dict
    summary: str
    builder: Callable

    def schema(self) -> dict:
        return {"category": self.category, "name": self.name, "summary": self.summary,
                "params": {k: {"type": v[0], "default": v[1]} for k, v in self.params.items()}}


_REGISTRY: dict[tuple[str, str], Preset] = {}


def _register(category, name, summary, **params):
    def wrap(fn):
        _REGISTRY[(category, name)] = Preset(category, name, params, summary, fn)
        return fn
    return wrap


def _eye(sigma, d):
    return lambda t, x, u: np.broadcast_to(sigma * np.eye(d), (x.shape[0], d, d)).copy()


def _need_controls(name, controls: ControlSet, du):
    if controls.dim_u != du:
        raise ConfigError(f"model preset {name!r} needs controls of dimension {du}, got {controls.dim_u}")


# models ------------------------------------------------------------------

@_register("model", "brownian", "f = 0, sigma = s I", dim=("int", 1), sigma=("float", 1.0))
def _brownian(controls, dim, sigma):
    return DiffusionModel(dim, lambda t, x, u: np.zeros_like(x), _eye(sigma, dim), controls,
                          lipschitz_hint=0.0, name="brownian")


@_register("model", "controlled-integrator", "f = u, sigma = s I", dim=("int", 1), sigma=("float", 1.0))
def _integrator(controls, dim, sigma):
    _need_controls("controlled-integrator", controls, dim)
    return DiffusionModel(dim, lambda t, x, u: np.array(u, dtype=float), _eye(sigma, dim), controls,
                          lipschitz_hint=1.0, name="controlled-integrator")


@_register("model", "lqr", "f = a x + b u, sigma = s I", dim=("int", 1), a=("float", 0.0),
           b=("float", 1.0), sigma=("float", 0.1))
def _lqr_model(controls, dim, a, b, sigma):
    _need_controls("lqr", controls, dim)
    return DiffusionModel(dim, lambda t, x, u: a * x + b * u, _eye(sigma, dim), controls,
                          lipschitz_hint=abs(a) + abs(b), name="lqr")


@_register("model", "ou", "f = theta (mu - x) + g u, sigma = s I", dim=("int", 1), theta=("float", 1.0),
           mu=("float", 0.0), sigma=("float", 1.0), gain=("float", 0.0))
def _ou(controls, dim, theta, mu, sigma, gain):
    if gain != 0.0:
        _need_controls("ou", controls, dim)

    def drift(t, x, u):
        out = theta * (mu - x)
        return out + gain * u if gain != 0.0 else out

    return DiffusionModel(dim, drift, _eye(sigma, dim), controls, lipschitz_hint=abs(theta) + abs(gain),
                          name="ou")


# costs -------------------------------------------------------------------

def _sq(x):
    return np.sum(np.asarray(x) ** 2, axis=1, keepdims=True)


@_register("cost", "constant-terminal", "c = 0, Psi = value", value=("list", [1.0]))
def _const_terminal(value):
    v = np.asarray(value, dtype=float)
    n = v.size
    return CostModel(n, lambda t, x, u: np.zeros((x.shape[0], n)),
                     lambda x: np.broadcast_to(v, (x.shape[0], n)).copy(), name="constant-terminal")


@_register("cost", "lqr", "c = q|x|^2 + r|u|^2, Psi = qT |x|^2 (copied to dim components)",
           dim=("int", 1), q=("float", 1.0), r=("float", 1.0), qT=("float", 1.0))
def _lqr_cost(dim, q, r, qT):
    return CostModel(dim, lambda t, x, u: np.repeat(q * _sq(x) + r * _sq(u), dim, axis=1),
                     lambda x: np.repeat(qT * _sq(x), dim, axis=1), name="lqr")


@_register("cost", "quadratic-terminal", "c = 0, Psi = scale |x|^2 + offset", dim=("int", 1),
           scale=("float", 1.0), offset=("float", 0.0))
def _quad_terminal(dim, scale, offset):
    return CostModel(dim, lambda t, x, u: np.zeros((x.shape[0], dim)),
                     lambda x: np.repeat(scale * _sq(x) + offset, dim, axis=1), name="quadratic-terminal")


@_register("cost", "zero", "c = 0, Psi = 0", dim=("int", 1))
def _zero_cost(dim):
    return CostModel(dim, lambda t, x, u: np.zeros((x.shape[0], dim)), lambda x: np.zeros((x.shape[0], dim)),
                     name="zero")


# drivers -----------------------------------------------------------------

@_register("driver", "constant", "G_j = value", dim=("int", 1), value=("float", 0.0))
def _const_driver(dim, value):
    return Driver(dim, lambda t, y, z, j: np.full(y.shape[0], value), 0.0, name="constant")


@_register("driver", "linear-decay", "G_j = -r y_j", dim=("int", 1), r=("float", 0.5))
def _linear_decay(dim, r):
    return Driver(dim, lambda t, y, z, j: -r * y[:, j], abs(r), name="linear-decay")


@_register("driver", "linear-z", "G_j = beta * sum(z_j); z_j has dim_x entries", dim=("int", 1),
           dim_x=("int", 1), beta=("float", 0.0))
def _linear_z(dim, dim_x, beta):
    return Driver(dim, lambda t, y, z, j: beta * z.sum(axis=1), abs(beta) * np.sqrt(dim_x), name="linear-z")


@_register("driver", "soft-positive", "G_j = kappa log(1 + exp(-y_j))", dim=("int", 1), kappa=("float", 1.0))
def _soft_positive(dim, kappa):
    return Driver(dim, lambda t, y, z, j: kappa * np.logaddexp(0.0, -y[:, j]), abs(kappa),
                  name="soft-positive")


@_register("driver", "zero", "G = 0", dim=("int", 1))
def _zero_driver(dim):
    return Driver(dim, lambda t, y, z, j: np.zeros(y.shape[0]), 0.0, name="zero")


# sets --------------------------------------------------------------------

@_register("set", "ball", "{|y - center| <= radius}", center=("list", [0.0]), radius=("float", 1.0))
def _ball(center, radius):
    return set_from_dict({"kind": "ball", "center": center, "radius": radius})


@_register("set", "box", "{lo <= y <= hi}", lo=("list", [0.0]), hi=("list", [1.0]))
def _box(lo, hi):
    return set_from_dict({"kind": "box", "lo": lo, "hi": hi})


@_register("set", "fullspace", "R^n", dim=("int", 1))
def _fullspace(dim):
    return set_from_dict({"kind": "fullspace", "dim": dim})


@_register("set", "halfspace", "{<normal, y> <= offset}", normal=("list", [1.0]), offset=("float", 0.0))
def _halfspace(normal, offset):
    return set_from_dict({"kind": "halfspace", "normal": normal, "offset": offset})


@_register("set", "orthant", "[0, inf)^n", dim=("int", 1))
def _orthant(dim):
    return set_from_dict({"kind": "orthant", "dim": dim})


def preset(category: str, name: str) -> Preset:
    try:
        return _REGISTRY[(category, name)]
    except KeyError:
        known = ", ".join(sorted(n for c, n in _REGISTRY if c == category))
        raise ConfigError(f"unknown {category} preset {name!r} (known: {known})") from None


def resolve_params(p: Preset, params: dict | None) -> dict[str, Any]:
    params = dict(params or {})
    extra = sorted(set(params) - set(p.params))
    if extra:
        raise ConfigError(f"{p.category} preset {p.name!r} has no parameter(s) {extra}; "
                          f"accepted: {sorted(p.params)}")
    out = {k: v[1] for k, v in p.params.items()}
    out.update(params)
    for k, (typ, _) in p.params.items():
        v = out[k]
        if typ == "int" and not (isinstance(v, int) and not isinstance(v, bool)):
            raise ConfigError(f"{p.category} preset {p.name!r}: parameter {k!r} must be an integer")
        if typ == "float" and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ConfigError(f"{p.category} preset {p.name!r}: parameter {k!r} must be a number")
        if typ == "list" and not isinstance(v, (list, tuple)):
            raise ConfigError(f"{p.category} preset {p.name!r}: parameter {k!r} must be a list")
    return out


def build(category: str, name: str, params: dict | None = None, **context):
    """Instantiate a preset; ``context`` carries extra arguments such as the model's control set."""
    p = preset(category, name)
    return p.builder(**context, **resolve_params(p, params))


def catalog_list() -> list[dict]:
    """Every preset with its parameter schema, sorted by category then name."""
    return [_REGISTRY[key].schema() for key in sorted(_REGISTRY)]
