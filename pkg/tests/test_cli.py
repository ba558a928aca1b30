import json
import subprocess
import sys
from pathlib import Path

import pytest

from edlab import cli
from edlab.config import ConfigError, load, parse, validate

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
EXPERIMENT_OF = {
    "simulate_wave": "simulate",
    "simulate_zero": "simulate",
    "sample": "sample",
    "path_check_quantum_rindler": "path-check",
    "path_check_broken": "path-check",
    "algebra_check": "algebra-check",
    "uniqueness_scan": "uniqueness-scan",
    "maxent_check": "maxent-check",
}


def write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.mark.parametrize("name", sorted(EXPERIMENT_OF))
def test_shipped_configs_validate_cleanly(name):
    cfg, findings = load(CONFIGS / f"{name}.cfg")
    assert findings == []
    assert validate(cfg, EXPERIMENT_OF[name]) == []


def test_small_grid_finding():
    cfg, _ = parse("[grid]\npoints_per_axis = 8\n")
    msgs = [f.message for f in validate(cfg)]
    assert "points_per_axis below minimum 16" in msgs


def test_boundary_support_warning():
    cfg, _ = parse("[grid]\nbox_half_width = 2.0\n[state]\nwidth = 1.0\n")
    found = validate(cfg, "simulate")
    assert [f.level for f in found] == ["warning"]
    assert "1e-12" in found[0].message and found[0].field == "grid.box_half_width"


def test_unknown_keys_and_sections_are_errors():
    _, findings = parse("[grid]\npoints = 64\n[extras]\nx = 1\n")
    assert {(f.field, f.message) for f in findings} == {("grid.points", "unknown key"), ("extras", "unknown section")}


def test_type_and_range_errors_name_the_field():
    cfg, findings = parse("[dynamics]\ndtau = fast\n")
    assert findings and findings[0].field == "dynamics.dtau"
    cfg, _ = parse("[dynamics]\neta = -1\nmode = turbo\n")
    fields = {f.field for f in validate(cfg)}
    assert fields == {"dynamics.eta", "dynamics.mode"}


def test_mode_lambda_consistency():
    cfg, _ = parse("[dynamics]\nmode = hybrid\nlambda = 0.2\n")
    assert [f.field for f in validate(cfg)] == ["dynamics.lambda"]
    cfg, _ = parse("[dynamics]\nmode = wave\nlambda = 0\n")
    assert [f.field for f in validate(cfg)] == ["dynamics.lambda"]


def test_unparseable_file_raises():
    with pytest.raises(ConfigError):
        parse("this is not a config\n")


def run(argv, capsys=None):
    code = cli.main(argv)
    return code


def test_zero_length_simulation_echoes_initial_diagnostics(tmp_path):
    cfg = write(tmp_path, f"[dynamics]\nmode = hybrid\npotential = mass\n[run]\noutput = {tmp_path / 'o'}\n")
    assert run(["simulate", "--config", cfg]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["status"] == "passed"
    assert summary["metrics"]["steps"] == 0
    assert summary["metrics"]["initial"]["norm"] == pytest.approx(1.0)
    assert summary["metrics"]["initial"] == summary["metrics"]["final"]
    for a in summary["assertions"]:
        assert {"name", "value", "tolerance", "passed"} <= set(a)
        assert summary["tolerances"][a["name"]] == a["tolerance"]
    assert summary["equation_tags"] and summary["versions"]["numpy"]
    assert summary["inputs"]["dynamics"]["mode"] == "hybrid"


def test_reruns_are_byte_identical(tmp_path):
    text = "[dynamics]\nmode = hybrid\npotential = mass\ndtau = 1e-3\nT = 0.01\n[state]\nmomentum = 0.4\n"
    cfg = write(tmp_path, text)
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert run(["simulate", "--config", cfg, "--out", str(out), "--seed", "3"]) == 0
        outs.append(out)
    for name in ("trajectory.csv", "final_state.csv", "summary.json"):
        a, b = (o / name for o in outs)
        if name == "summary.json":
            sa = json.loads(a.read_text())
            sb = json.loads(b.read_text())
            sa["inputs"]["run"]["output"] = sb["inputs"]["run"]["output"] = None
            assert sa == sb
        else:
            assert a.read_bytes() == b.read_bytes()


def test_sample_reruns_are_byte_identical(tmp_path):
    text = ("[dynamics]\nmode = hybrid\npotential = mass\ndtau = 1e-3\nT = 0.005\n"
            "[state]\nmomentum = 0.5\n[sampler]\nwalkers = 5000\nl1_tolerance = 1.0\n")
    cfg = write(tmp_path, text)
    for k in range(2):
        assert run(["sample", "--config", cfg, "--out", str(tmp_path / f"s{k}"), "--seed", "11"]) == 0
    assert (tmp_path / "s0" / "discrepancy.csv").read_bytes() == (tmp_path / "s1" / "discrepancy.csv").read_bytes()
    header = (tmp_path / "s0" / "discrepancy.csv").read_text().splitlines()[0]
    assert header == "step,tau,l1"


def test_seed_override_is_recorded(tmp_path):
    cfg = write(tmp_path, "[maxent]\ndrift_grads = 1.0\n")
    assert run(["maxent-check", "--config", cfg, "--out", str(tmp_path / "m"), "--seed", "42"]) == 0
    summary = json.loads((tmp_path / "m" / "summary.json").read_text())
    assert summary["seed"] == 42 and summary["inputs"]["run"]["seed"] == 42
    header = (tmp_path / "m" / "maxent.csv").read_text().splitlines()[0]
    assert header.startswith("drift_grad,alpha,alpha_prime,mean")


def test_uniqueness_scan_verdicts(tmp_path):
    cfg = write(tmp_path, "[scan]\nstates = 4\n")
    assert run(["uniqueness-scan", "--config", cfg, "--out", str(tmp_path / "u")]) == 0
    summary = json.loads((tmp_path / "u" / "summary.json").read_text())
    closing = summary["metrics"]["closing"]
    assert len(closing) == 5
    assert all(c["h2_scale"] == -0.5 * c["f1_scale"] and c["f2"] == c["h0"] == c["h1"] == 0 for c in closing)
    rows = (tmp_path / "u" / "scan.csv").read_text().splitlines()
    assert rows[0] == "f1_scale,f2,h0,h1,h2_scale,residual,verdict,canonical,ode_f1,ode_h2"
    assert len(rows) == 201


def test_invalid_config_exits_2_with_field_message(tmp_path, capsys):
    cfg = write(tmp_path, "[grid]\npoints_per_axis = 8\nbogus = 1\n")
    assert run(["simulate", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert "grid.bogus: unknown key" in err
    assert "grid.points_per_axis: points_per_axis below minimum 16" in err


def test_missing_file_exits_2(tmp_path):
    assert run(["simulate", "--config", str(tmp_path / "absent.cfg")]) == 2


def test_bad_thread_setting_exits_2(tmp_path, monkeypatch, capsys):
    cfg = write(tmp_path, "[dynamics]\nT = 0\n")
    monkeypatch.setenv("EDLAB_THREADS", "zero")
    assert run(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "EDLAB_THREADS" in capsys.readouterr().err


def test_experiment_specific_validation(tmp_path):
    cfg = write(tmp_path, "[lattice]\nn_sites = 1\n")
    assert run(["path-check", "--config", cfg]) == 2
    assert run(["algebra-check", "--config", cfg]) == 2


def test_numerical_failure_exits_3(tmp_path, capsys):
    text = f"[dynamics]\ndtau = 0.5\nT = 1.0\npotential = mass\n[run]\noutput = {tmp_path / 'o'}\n"
    assert run(["simulate", "--config", write(tmp_path, text)]) == 3
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["status"] == "numerical-failure"
    assert summary["diagnostics"]["error"] == "StepError"
    assert "stability bound" in capsys.readouterr().err


def test_failed_assertion_exits_1(tmp_path):
    text = "[lattice]\nn_sites = 2\n[grid]\nbox_half_width = 6.0\npoints_per_axis = 32\n[state]\nfamily = path-check\n"
    text += "[dynamics]\npotential = mass\nlambda = 0.125\n[path]\nmin_order = 3.5\n"
    assert run(["path-check", "--config", write(tmp_path, text), "--out", str(tmp_path / "p")]) == 1
    summary = json.loads((tmp_path / "p" / "summary.json").read_text())
    assert summary["status"] == "failed" and not summary["passed"]
    rows = (tmp_path / "p" / "path_check.csv").read_text().splitlines()
    assert rows[0] == "eps,disc_rho,disc_phi" and len(rows) == 4


def test_console_script_runs(tmp_path):
    cfg = write(tmp_path, "[maxent]\ndrift_grads = 0.5\n")
    out = subprocess.run([sys.executable, "-m", "edlab.cli", "maxent-check", "--config", cfg, "--out",
                          str(tmp_path / "c")], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert "PASS moments-match-closed-form" in out.stdout
