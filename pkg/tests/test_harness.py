import json
import subprocess
import sys

import numpy as np
import pytest

from blochwkb.cli import SUBCOMMANDS, build_parser, main
from blochwkb.harness import (DEFAULTS, CheckReport, ConfigError, Experiment, convergence_fit, fmt, load_config,
                              run_experiment, validate_config)

SMALL = {"band.N_p": 64, "band.M": 8, "perturb.x": [0.0, 1.0]}


def test_validate_config():
    assert validate_config({}) == DEFAULTS
    with pytest.raises(ConfigError, match="unknown"):
        validate_config({"band.Np": 64})
    with pytest.raises(ConfigError, match="expected"):
        validate_config({"band.N_p": "64"})
    with pytest.raises(ConfigError):
        validate_config({"order": "order5"})
    with pytest.raises(ConfigError):
        validate_config({"eps": -0.1})
    with pytest.raises(ConfigError):
        validate_config({"traj.aux": [0.0]})
    with pytest.raises(ConfigError):
        Experiment("nonsense", {}, "out")


def test_load_json_and_toml(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"band": {"N_p": 64}, "eps": 0.125}))
    (tmp_path / "c.toml").write_text("eps = 0.125\n[band]\nN_p = 64\n")
    a, b = load_config(tmp_path / "c.json"), load_config(tmp_path / "c.toml")
    assert a == b and a["band.N_p"] == 64 and a["eps"] == 0.125
    assert load_config() == DEFAULTS


def test_fmt_and_fit():
    assert fmt(True) == "true" and fmt(3) == "3" and fmt(0.1) == "0.10000000000000001"
    eps = [0.1, 0.05, 0.025]
    s, c, r = convergence_fit(eps, [2 * e**2 for e in eps])
    assert s == pytest.approx(2.0, abs=1e-12) and c == pytest.approx(np.log(2)) and r < 1e-12
    s, _, _ = convergence_fit(eps, [3 * e for e in eps])
    assert s == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        convergence_fit([0.1, 0.05], [1.0, 0.5])
    with pytest.raises(ValueError):
        convergence_fit(eps, [1.0, 0.0, 0.5])


def test_check_report():
    r = CheckReport()
    r.le("a", 1e-9, 1e-8)
    r.ge("b", 2.0, 1.9)
    assert r.passed
    r.le("c", 1.0, 0.5)
    assert not r.passed and [i["pass"] for i in r.items] == [True, True, False]


def test_cli_parser_subcommands():
    p = build_parser()
    for name in ("bands", "perturb", "verify-identities", "trajectory", "evolve", "prepare", "reconstruct",
                 "converge", "special-case"):
        assert name in SUBCOMMANDS
        a = p.parse_args([name, "--out", "x", "--check"])
        assert a.command == name and a.out == "x" and a.check
    a = p.parse_args(["--config", "c.json", "bands"])
    assert a.config == "c.json" and a.out == "out" and not a.check


def _write(tmp_path, cfg):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_cli_bands_and_perturb_deterministic(tmp_path):
    cfg = _write(tmp_path, SMALL)
    for cmd, files in (("bands", ["bands.csv"]), ("perturb", ["perturb.csv", "display_report.json"])):
        outs = []
        for run in ("a", "b"):
            out = tmp_path / f"{cmd}_{run}"
            assert main(["--config", cfg, "--out", str(out), cmd]) == 0
            outs.append(out)
        for f in files + ["summary.json", "config.json"]:
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f
    rows = np.loadtxt(tmp_path / "bands_a" / "bands.csv", delimiter=",", skiprows=1)
    assert rows.shape == (64, 8)


def test_cli_trajectory_and_prepare(tmp_path):
    cfg = _write(tmp_path, {**SMALL, "traj.T": 0.1, "eps": 0.125, "grid.points_per_cell": 8})
    assert main(["--config", cfg, "--out", str(tmp_path / "t"), "trajectory"]) == 0
    header = (tmp_path / "t" / "traj.csv").read_text().splitlines()[0]
    assert header.startswith("t,Q,P,S,P2")
    assert main(["--config", cfg, "--out", str(tmp_path / "p"), "--check", "prepare"]) == 0
    assert (tmp_path / "p" / "psi0.bin").exists() and (tmp_path / "p" / "psi0.json").exists()


def test_cli_config_errors(tmp_path, capsys):
    bad = _write(tmp_path, {"band.Np": 3})
    assert main(["--config", bad, "--out", str(tmp_path / "o"), "bands"]) == 2
    assert "unknown config key" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.json"), "bands"]) == 2


def test_check_flag_exit_code(tmp_path):
    # N_p = 32 is too coarse for the identity thresholds
    cfg = _write(tmp_path, {"band.N_p": 32, "band.M": 8, "identities.refine": False})
    out = str(tmp_path / "i")
    assert main(["--config", cfg, "--out", out, "verify-identities"]) == 0
    assert main(["--config", cfg, "--out", out, "--check", "verify-identities"]) == 1


def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, {"band.N_p": 16, "band.M": 8})
    assert main(["--config", cfg, "--out", str(tmp_path / "g"), "bands"]) == 3
    assert "GaugeError" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, SMALL)
    r = subprocess.run([sys.executable, "-m", "blochwkb", "--config", cfg, "--out", str(tmp_path / "m"), "bands"],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert json.loads(r.stdout.strip().splitlines()[-1])["experiment"] == "bands"


def test_run_experiment_summary(tmp_path):
    summary, report = run_experiment(Experiment("bands", SMALL, tmp_path))
    on_disk = json.loads((tmp_path / "summary.json").read_text())
    assert on_disk["passed"] == report.passed and "seconds" not in on_disk
    assert on_disk["result"]["N_p"] == 64
