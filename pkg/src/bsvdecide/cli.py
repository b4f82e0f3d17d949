"""Config-driven front end: ``bsvdecide run <stage> --config FILE`` and ``bsvdecide catalog``.

Exit status: 0 success, 1 invalid configuration, 2 numerical failure,
3 a cross-validation check failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, _io
from ._parallel import set_threads
from .bsde import conditional_g_expectation, save_solution
from .catalog import catalog_list
from .config import ExperimentConfig, load_config, validate
from .decision import closed_loop_cost, dp_consistency, extract_policy, save_policy
from .errors import BsvError, ConfigError
from .hjb import feynman_kac_crosscheck, residual_check, save_values, solve_system
from .sde import save_bundle, simulate_paths
from .viability import SampleCloudSpec, check_condition_3_3, empirical_viability

logger = logging.getLogger("bsvdecide")

STAGES = ("simulate", "solve-bsde", "solve-pde", "check-viability", "extract-policy", "evaluate",
          "cross-validate")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3

_ALIASES = {s.replace("-", ""): s for s in STAGES} | {"all": "all"}


def _stage_name(text: str) -> str:
    key = text.replace("-", "").replace("_", "").lower()
    if key not in _ALIASES:
        raise argparse.ArgumentTypeError(f"unknown stage {text!r}; choose from {', '.join(STAGES)}, all")
    return _ALIASES[key]


def _needs(cfg: ExperimentConfig, section: str, stage: str):
    if getattr(cfg, section) is None:
        raise ConfigError(f"stage {stage!r} needs the {section!r} section in the config")


class Pipeline:
    """Runs stages on demand, computing prerequisites once and caching them."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.prob = validate(cfg)
        self.out = out
        self.timings: dict[str, float] = {}
        self.seeds: dict[str, int] = {}
        self.summary: list[str] = []
        self.check_failed = False
        self._cache: dict[str, object] = {}

    def _timed(self, name, fn):
        if name not in self._cache:
            start = time.perf_counter()
            self._cache[name] = fn()
            self.timings[name] = round(time.perf_counter() - start, 6)
        return self._cache[name]

    def run(self, stage: str):
        return getattr(self, "_" + stage.replace("-", "_"))()

    def _simulate(self):
        def go():
            p, c = self.prob, self.cfg
            seed = self.seeds.setdefault("simulate", c.seed_for("simulate"))
            control = np.asarray(c.simulation.control if c.simulation.control is not None
                                 else p.controls.points[0], dtype=float)
            paths = simulate_paths(p.model, control, c.simulation.x0, p.tgrid, c.simulation.n_paths, seed)
            save_bundle(paths, self.out)
            return paths
        return self._timed("simulate", go)

    def _solve_bsde(self):
        paths = self._simulate()

        def go():
            p = self.prob
            y0, sol = conditional_g_expectation(paths, p.driver, p.cost, p.basis, self.cfg.solver.picard_iters)
            save_solution(sol, self.out)
            _io.write_json(self.out / "bsde_report.json", {
                "y0": y0.tolist(), "y0_stderr": sol.y0_stderr.tolist(), "y0_spread": sol.y0_spread.tolist(),
                "residual_scale": sol.residual_scale, "max_condition": float(sol.condition.max())})
            return sol
        return self._timed("solve-bsde", go)

    def _solve_pde(self):
        _needs(self.cfg, "space", "solve-pde")

        def go():
            p, s = self.prob, self.cfg.solver
            values = solve_system(p.model, p.cost, p.driver, p.space, p.tgrid, scheme=s.scheme, mode=p.mode)
            save_values(values, self.out)
            rep = residual_check(values, p.model, p.cost, p.driver, s.residual_nodes,
                                 seed=self.cfg.seeds.base)
            _io.write_json(self.out / "residual_report.json", vars(rep))
            return values
        return self._timed("solve-pde", go)

    def _check_viability(self):
        _needs(self.cfg, "viability", "check-viability")
        sol = self._solve_bsde()

        def go():
            p, v, c = self.prob, self.cfg.viability, self.cfg
            seed = self.seeds.setdefault("check-viability", c.seed_for("check-viability"))
            x_lo = v.x_lo if v.x_lo is not None else (c.space.lo if c.space else np.asarray(c.simulation.x0) - 1)
            x_hi = v.x_hi if v.x_hi is not None else (c.space.hi if c.space else np.asarray(c.simulation.x0) + 1)
            sampler = SampleCloudSpec(t_range=tuple(v.t_range or (c.time.t0, c.time.T)),
                                      x_lo=np.asarray(x_lo, float), x_hi=np.asarray(x_hi, float),
                                      y_lo=np.asarray(v.y_lo, float), y_hi=np.asarray(v.y_hi, float),
                                      z_lo=v.z_lo, z_hi=v.z_hi, n_samples=v.n_samples)
            cond = check_condition_3_3(p.cset, p.driver, p.cost, p.model, sampler, v.C, h=v.h, seed=seed)
            path = empirical_viability(sol, p.cset, v.eps_factor * sol.residual_scale)
            doc = {"condition": json.loads(cond.to_json()), "pathwise": json.loads(path.to_json())}
            _io.write_json(self.out / "viability_report.json", doc)
            self.summary += [cond.summary_line(), path.summary_line()]
            return cond, path
        return self._timed("check-viability", go)

    def _extract_policy(self):
        values = self._solve_pde()

        def go():
            policy = extract_policy(values, self.prob.mode)
            save_policy(policy, self.out)
            return policy
        return self._timed("extract-policy", go)

    def _evaluate(self):
        policy = self._extract_policy()

        def go():
            p, c = self.prob, self.cfg
            seed = self.seeds.setdefault("evaluate", c.seed_for("evaluate"))
            out = closed_loop_cost(policy, p.model, p.cost, p.driver, c.simulation.x0, c.simulation.n_paths,
                                   p.basis, seed, c.solver.picard_iters)
            (self.out / "cost_outcome.csv").write_text(out.csv_header() + "\n" + out.csv_row() + "\n")
            return out
        return self._timed("evaluate", go)

    def _cross_validate(self):
        _needs(self.cfg, "cross_validate", "cross-validate")
        values = self._solve_pde()
        policy = self._extract_policy()

        def go():
            p, c, xv = self.prob, self.cfg, self.cfg.cross_validate
            seed = self.seeds.setdefault("cross-validate", c.seed_for("cross-validate"))
            fk = feynman_kac_crosscheck(values, p.model, p.cost, p.driver, xv.x0_set, xv.n_paths, p.basis,
                                        seed=seed, grid_tol=xv.grid_tol, picard_iters=c.solver.picard_iters)
            doc = {"feynman_kac": {"max_discrepancy": fk.max_discrepancy, "passed": fk.passed,
                                   "points": fk.points}}
            verdict = "PASS" if fk.passed else "FAIL"
            self.summary.append(f"{verdict} FeynmanKac: max discrepancy {fk.max_discrepancy:.6g} "
                                f"over {len(fk.points)} point(s)")
            ok = fk.passed
            if xv.dp_r is not None:
                dp = dp_consistency(values, policy, p.model, p.cost, p.driver, xv.dp_r, xv.x0_set[0],
                                    xv.n_paths, p.basis, seed + 1000, c.solver.picard_iters)
                within = dp.within(3.0)
                doc["dp_consistency"] = {"r": dp.r, "phi0": dp.phi0.tolist(), "estimate": dp.estimate.tolist(),
                                         "gap": dp.gap.tolist(), "std_err": dp.std_err.tolist(),
                                         "interp_error": dp.interp_error, "passed": within}
                self.summary.append(f"{'PASS' if within else 'FAIL'} DpConsistency: gap "
                                    f"{np.abs(dp.gap).max():.6g} at r={dp.r}")
                ok = ok and within
            _io.write_json(self.out / "crosscheck_report.json", doc)
            self.check_failed = not ok
            return doc
        return self._timed("cross-validate", go)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(pipe: Pipeline, command: str, threads: int):
    out = pipe.out
    if pipe.summary:
        (out / "summary.txt").write_text("\n".join(pipe.summary) + "\n")
    files = sorted(p for p in out.iterdir() if p.is_file() and p.name != "run_manifest.json")
    manifest = {
        "command": command,
        "config_hash": pipe.cfg.config_hash(),
        "config": pipe.cfg.model_dump(mode="json"),
        "version": __version__,
        "threads": threads,
        "seeds": pipe.seeds,
        "stage_wall_time_s": pipe.timings,
        "outputs": [{"file": p.name, "bytes": p.stat().st_size, "sha256": _sha256(p)} for p in files],
    }
    _io.write_json(out / "run_manifest.json", manifest)


def run(command: str, config, overrides=(), seed: int | None = None, out=None, threads: int = 1) -> int:
    """Execute one stage (or ``all``) and return the process exit status."""
    try:
        extra = list(overrides or [])
        if seed is not None:
            extra.append(f"seeds.base={int(seed)}")
        cfg = load_config(config, extra)
        if out is not None:
            cfg.output = str(out)
        out_dir = Path(cfg.output)
        pipe = Pipeline(cfg, out_dir)
        stages = [s for s in STAGES if not _skip(cfg, s)] if command == "all" else [command]
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    set_threads(threads)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        for s in stages:
            pipe.run(s)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BsvError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure in {command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        _write_manifest(pipe, command, threads)
        return EXIT_NUMERIC
    _write_manifest(pipe, command, threads)
    for line in pipe.summary:
        print(line)
    return EXIT_CHECK if pipe.check_failed else EXIT_OK


def _skip(cfg: ExperimentConfig, stage: str) -> bool:
    """Stages silently left out of ``all`` when their config section is absent."""
    if stage == "check-viability":
        return cfg.viability is None
    if stage == "cross-validate":
        return cfg.cross_validate is None
    if stage in ("solve-pde", "extract-policy", "evaluate"):
        return cfg.space is None
    return False


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bsvdecide", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run a pipeline stage")
    r.add_argument("stage", type=_stage_name, help=f"one of {', '.join(STAGES)}, all")
    r.add_argument("--config", required=True, help="config file, or the name of a bundled config")
    r.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, repeatable (e.g. solver.picard_iters=5)")
    r.add_argument("--seed", type=int, default=None, help="base seed (sets seeds.base)")
    r.add_argument("--out", default=None, help="output directory (sets output)")
    r.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    c = sub.add_parser("catalog", help="list built-in presets")
    c.add_argument("--json", action="store_true", help="machine-readable listing")
    return ap


def _print_catalog(as_json: bool):
    items = catalog_list()
    if as_json:
        print(json.dumps(items, indent=2))
        return
    for it in items:
        params = ", ".join(f"{k}={v['default']!r}" for k, v in it["params"].items())
        print(f"{it['category']:<7} {it['name']:<22} {it['summary']}  [{params}]")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.cmd == "catalog":
        _print_catalog(args.json)
        return EXIT_OK
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.stage, args.config, args.override, args.seed, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
