import json
import subprocess
import sys

import pytest

from bsvdecide import build, catalog_list
from bsvdecide.cli import STAGES, main, run
from bsvdecide.config import bundled_configs, load_config, parse_config

# keep the bundled heat problem but trim the sample sizes
FAST = ["simulation.n_paths=400", "cross_validate.n_paths=600", "viability.n_samples=400"]


def _manifest(out):
    return json.loads((out / "run_manifest.json").read_text())


def test_catalog_lists_presets(capsys):
    items = catalog_list()
    names = {(i["category"], i["name"]) for i in items}
    assert ("model", "lqr") in names and ("cost", "lqr") in names
    assert items == catalog_list()
    assert main(["catalog", "--json"]) == 0
    assert json.loads(capsys.readouterr().out) == items


def test_every_preset_builds_at_defaults():
    from bsvdecide import ControlSet
    for it in catalog_list():
        ctx = {}
        if it["category"] == "model":
            du = it["params"]["dim"]["default"] if it["name"] == "controlled-integrator" else 1
            ctx = {"controls": ControlSet.mesh([[0.0] * du])}
        assert build(it["category"], it["name"], {}, **ctx) is not None


def test_config_round_trip():
    for name in bundled_configs():
        cfg = load_config(name)
        again = parse_config(json.loads(cfg.canonical_json()))
        assert again.config_hash() == cfg.config_hash()


def test_dimension_mismatch_names_both_keys(tmp_path, capsys):
    code = run("simulate", "heat", ["set.dim=2"], out=tmp_path)
    assert code == 1
    err = capsys.readouterr().err
    assert "set.dim" in err and "driver.params.dim" in err


def test_unknown_key_rejected(tmp_path, capsys):
    assert run("simulate", "heat", ["solver.warp=3"], out=tmp_path) == 1
    assert "warp" in capsys.readouterr().err
    assert run("simulate", str(tmp_path / "missing.json"), out=tmp_path) == 1


def test_run_all_heat_writes_manifest(tmp_path, capsys):
    code = run("all", "heat", FAST, out=tmp_path)
    assert code == 0
    man = _manifest(tmp_path)
    assert set(man["stage_wall_time_s"]) == set(STAGES)
    for entry in man["outputs"]:
        assert (tmp_path / entry["file"]).stat().st_size == entry["bytes"]
    for name in ("cost_outcome.csv", "viability_report.json", "crosscheck_report.json", "summary.txt"):
        assert (tmp_path / name).exists()
    out = capsys.readouterr().out
    assert "PASS" in out


def test_negative_push_reports_fail_but_exits_zero(tmp_path, capsys):
    assert run("check-viability", "negative_push", out=tmp_path) == 0
    out = capsys.readouterr().out
    assert "FAIL" in out
    doc = json.loads((tmp_path / "viability_report.json").read_text())
    assert doc["condition"]["passed"] is False


def test_seed_flag_sets_base(tmp_path):
    assert run("simulate", "heat", FAST, seed=77, out=tmp_path) == 0
    man = _manifest(tmp_path)
    assert man["config"]["seeds"]["base"] == 77


def test_numerical_failure_exit_two(tmp_path, capsys):
    assert run("solve-pde", "heat", ["time.n_steps=10", "cross_validate.dp_r=5"], out=tmp_path) == 2
    assert "CflViolation" in capsys.readouterr().err


def test_cross_validate_failure_exit_three(tmp_path):
    code = run("cross-validate", "lqr", ["cross_validate.grid_tol=0", "cross_validate.n_paths=20000",
                                         "cross_validate.dp_r=null"], out=tmp_path)
    assert code == 3


def test_stage_aliases(tmp_path):
    assert main(["run", "Simulate", "--config", "heat", "--out", str(tmp_path)] +
                sum((["--override", o] for o in FAST), [])) == 0


@pytest.mark.parametrize("threads", [1, 4])
def test_outputs_independent_of_threads_and_repeats(tmp_path, threads):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("evaluate", "heat", FAST, out=a, threads=1) == 0
    assert run("evaluate", "heat", FAST, out=b, threads=threads) == 0
    ha = {e["file"]: e["sha256"] for e in _manifest(a)["outputs"]}
    hb = {e["file"]: e["sha256"] for e in _manifest(b)["outputs"]}
    assert ha == hb


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "bsvdecide.cli", "catalog"], capture_output=True, text=True)
    assert res.returncode == 0 and "lqr" in res.stdout
