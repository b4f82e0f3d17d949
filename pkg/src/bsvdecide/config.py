"""Experiment configuration: strict JSON schema, cross-reference checks, dotted overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import catalog
from .bsde import RegressionBasis
from .errors import ConfigError
from .geometry import set_from_dict
from .hjb import PerComponent, Scalarized, SpaceGrid
from .sde import ControlSet, TimeGrid

__all__ = ["ExperimentConfig", "load_config", "parse_config", "apply_overrides", "bundled_configs",
           "Problem"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=False)


class PresetSpec(_Strict):
    preset: str
    params: dict = Field(default_factory=dict)


class ControlSpec(_Strict):
    kind: Literal["mesh", "box"] = "mesh"
    points: list[list[float]] | None = None
    lo: list[float] | None = None
    hi: list[float] | None = None
    mesh_per_dim: list[int] | None = None


class TimeSpec(_Strict):
    t0: float = 0.0
    T: float
    n_steps: int = Field(gt=0)


class SpaceSpec(_Strict):
    lo: list[float]
    hi: list[float]
    nodes: list[int]


class SimulationSpec(_Strict):
    x0: list[float]
    n_paths: int = Field(default=2000, gt=0)
    control: list[float] | None = None


class ModeSpec(_Strict):
    kind: Literal["per-component", "scalarized"] = "per-component"
    j: int = 0
    weights: list[float] | None = None


class SolverSpec(_Strict):
    basis: Literal["polynomial", "local"] = "polynomial"
    degree: int = Field(default=2, ge=0)
    n_cells: int = Field(default=4, ge=1)
    ridge: float = Field(default=1e-10, ge=0.0)
    picard_iters: int = Field(default=3, ge=1)
    scheme: Literal["explicit", "semi-implicit"] = "explicit"
    mode: ModeSpec = Field(default_factory=ModeSpec)
    residual_nodes: int = Field(default=200, gt=0)


class ViabilitySpec(_Strict):
    C: float = Field(default=1.0, gt=0.0)
    n_samples: int = Field(default=1000, gt=0)
    t_range: list[float] | None = None
    x_lo: list[float] | None = None
    x_hi: list[float] | None = None
    y_lo: list[float]
    y_hi: list[float]
    z_lo: float = 0.0
    z_hi: float = 0.0
    h: float | None = None
    eps_factor: float = Field(default=5.0, ge=0.0)


class CrossValidateSpec(_Strict):
    x0_set: list[list[float]]
    n_paths: int = Field(default=2000, gt=0)
    grid_tol: float = Field(default=2e-3, ge=0.0)
    dp_r: int | None = None


class SeedSpec(_Strict):
    base: int = 0


class ExperimentConfig(_Strict):
    name: str = "experiment"
    model: PresetSpec
    controls: ControlSpec = Field(default_factory=lambda: ControlSpec(points=[[0.0]]))
    cost: PresetSpec
    driver: PresetSpec
    set: dict
    time: TimeSpec
    space: SpaceSpec | None = None
    simulation: SimulationSpec
    solver: SolverSpec = Field(default_factory=SolverSpec)
    viability: ViabilitySpec | None = None
    cross_validate: CrossValidateSpec | None = None
    seeds: SeedSpec = Field(default_factory=SeedSpec)
    output: str = "out"

    @field_validator("set")
    @classmethod
    def _set_kind(cls, v):
        if "kind" not in v:
            raise ValueError("set needs a 'kind' key")
        return v

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def seed_for(self, stage: str) -> int:
        offsets = {"simulate": 0, "check-viability": 1, "evaluate": 2, "cross-validate": 3}
        return self.seeds.base + offsets[stage]


class Problem:
    """Objects built from a validated config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.controls = _controls(cfg.controls)
        self.model = catalog.build("model", cfg.model.preset, cfg.model.params, controls=self.controls)
        self.cost = catalog.build("cost", cfg.cost.preset, cfg.cost.params)
        self.driver = catalog.build("driver", cfg.driver.preset, cfg.driver.params)
        self.cset = set_from_dict(cfg.set)
        self.tgrid = TimeGrid(cfg.time.t0, cfg.time.T, cfg.time.n_steps)
        self.space = SpaceGrid(cfg.space.lo, cfg.space.hi, cfg.space.nodes) if cfg.space else None
        s = cfg.solver
        self.basis = RegressionBasis(s.basis, s.degree, s.n_cells, s.ridge)
        if s.mode.kind == "scalarized":
            self.mode = Scalarized(tuple(s.mode.weights or [1.0] * self.cost.dim_n))
        else:
            self.mode = PerComponent(s.mode.j)


def _controls(spec: ControlSpec) -> ControlSet:
    if spec.kind == "box":
        if spec.lo is None or spec.hi is None or spec.mesh_per_dim is None:
            raise ConfigError("controls: box kind needs lo, hi, and mesh_per_dim")
        return ControlSet.box(spec.lo, spec.hi, spec.mesh_per_dim)
    if spec.points is None:
        raise ConfigError("controls: mesh kind needs points")
    return ControlSet.mesh(spec.points)


def _dim_of(category: str, spec: PresetSpec) -> tuple[int, str]:
    """Dimension declared by a preset and the config key it comes from."""
    p = catalog.preset(category, spec.preset)
    params = catalog.resolve_params(p, spec.params)
    if "dim" in params:
        return int(params["dim"]), f"{category}.params.dim"
    if "value" in params and isinstance(params["value"], (list, tuple)):
        return len(params["value"]), f"{category}.params.value"
    raise ConfigError(f"{category} preset {spec.preset!r} does not declare a dimension")


def _set_dim(spec: dict) -> int:
    try:
        return set_from_dict(spec).dim
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"set: {exc}") from exc


def validate(cfg: ExperimentConfig) -> Problem:
    """Check every cross-reference, then build the problem objects."""
    n_set = _set_dim(cfg.set)
    n_drv, k_drv = _dim_of("driver", cfg.driver)
    n_cost, k_cost = _dim_of("cost", cfg.cost)
    d, k_model = _dim_of("model", cfg.model)
    if n_set != n_drv:
        raise ConfigError(f"set.dim ({n_set}) does not match {k_drv} ({n_drv})")
    if n_cost != n_drv:
        raise ConfigError(f"{k_cost} ({n_cost}) does not match {k_drv} ({n_drv})")
    if len(cfg.simulation.x0) != d:
        raise ConfigError(f"simulation.x0 has length {len(cfg.simulation.x0)} but {k_model} is {d}")
    if cfg.space is not None:
        for key in ("lo", "hi", "nodes"):
            if len(getattr(cfg.space, key)) != d:
                raise ConfigError(f"space.{key} has length {len(getattr(cfg.space, key))} but {k_model} is {d}")
    if cfg.cross_validate is not None:
        if cfg.space is None:
            raise ConfigError("cross_validate requires a space grid (space)")
        for i, x0 in enumerate(cfg.cross_validate.x0_set):
            if len(x0) != d:
                raise ConfigError(f"cross_validate.x0_set[{i}] has length {len(x0)} but {k_model} is {d}")
        r = cfg.cross_validate.dp_r
        if r is not None and not 0 < r <= cfg.time.n_steps:
            raise ConfigError(f"cross_validate.dp_r ({r}) must lie in (0, time.n_steps={cfg.time.n_steps}]")
    if cfg.viability is not None:
        v = cfg.viability
        for key in ("y_lo", "y_hi"):
            if len(getattr(v, key)) != n_set:
                raise ConfigError(f"viability.{key} has length {len(getattr(v, key))} but set.dim is {n_set}")
        for key in ("x_lo", "x_hi"):
            val = getattr(v, key)
            if val is not None and len(val) != d:
                raise ConfigError(f"viability.{key} has length {len(val)} but {k_model} is {d}")
    m = cfg.solver.mode
    if m.kind == "per-component" and not 0 <= m.j < n_drv:
        raise ConfigError(f"solver.mode.j ({m.j}) out of range for {k_drv} ({n_drv})")
    if m.kind == "scalarized" and m.weights is not None and len(m.weights) != n_drv:
        raise ConfigError(f"solver.mode.weights has length {len(m.weights)} but {k_drv} is {n_drv}")
    try:
        prob = Problem(cfg)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.simulation.control is not None and len(cfg.simulation.control) != prob.controls.dim_u:
        raise ConfigError(f"simulation.control has length {len(cfg.simulation.control)} "
                          f"but the control mesh has dimension {prob.controls.dim_u}")
    return prob


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    out = copy.deepcopy(raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, text = item.partition("=")
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not an object")
        node[parts[-1]] = _coerce(text)
    return out


def parse_config(raw: dict, overrides=None, source: str = "<config>") -> ExperimentConfig:
    raw = apply_overrides(raw, overrides)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        lines = [f"{source}: invalid configuration"]
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"])
            lines.append(f"  {loc}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None


def bundled_configs() -> dict[str, Path]:
    root = resources.files("bsvdecide") / "configs"
    return {Path(str(p)).stem: Path(str(p)) for p in root.iterdir() if str(p).endswith(".json")}


def load_config(path, overrides=None) -> ExperimentConfig:
    """Read a config file, or a bundled config by bare name (``heat``, ``lqr``, ...)."""
    p = Path(path)
    if not p.exists():
        bundled = bundled_configs()
        if str(path) in bundled:
            p = bundled[str(path)]
        else:
            raise ConfigError(f"config {path!s} not found (bundled: {', '.join(sorted(bundled))})")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return parse_config(raw, overrides, source=str(p))
