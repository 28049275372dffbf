"""Command line front door: config layering, artifacts, exit codes."""

import json
import math
import os

import pytest

from ergolq import cli
from ergolq.coefficients import builtin_scenarios, save_scenario


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# configuration errors (exit 2, no artifacts)


def test_unknown_scenario_exits_2_without_output(tmp_path, capsys):
    out = tmp_path / "nope"
    rc = cli.main(["simulate", "--scenario", "no-such-model", "--out", str(out)])
    assert rc == 2
    assert not out.exists()
    assert "unknown scenario" in capsys.readouterr().err


def test_missing_scenario_exits_2(tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x").exists()


def test_bad_flag_values_exit_2(tmp_path):
    args = ["simulate", "--scenario", "scalar-constant", "--out", str(tmp_path / "x")]
    assert cli.main(args + ["--paths", "1"]) == 2
    assert cli.main(args + ["--tol", "0"]) == 2
    assert cli.main(args + ["--seed", "-3"]) == 2
    assert not (tmp_path / "x").exists()


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_path": 100}))
    rc = cli.main([
        "simulate", "--scenario", "scalar-constant",
        "--config", str(cfg), "--out", str(tmp_path / "x"),
    ])
    assert rc == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_scan_grid_must_contain_zero(tmp_path):
    rc = cli.main([
        "scan", "--scenario", "scalar-constant", "--eps-grid", "0.1,0.2",
        "--out", str(tmp_path / "x"),
    ])
    assert rc == 2


def test_scan_grid_too_small_for_fit_is_config_error(tmp_path, capsys):
    out = tmp_path / "x"
    rc = cli.main([
        "scan", "--scenario", "scalar-constant", "--eps-grid=-0.1,0,0.1",
        "--out", str(out),
    ])
    assert rc == 2
    assert "three nonzero points" in capsys.readouterr().err
    assert not out.exists()


def test_verify_checks_conflicts_with_scenario(tmp_path, capsys):
    rc = cli.main([
        "verify", "--scenario", "scalar-constant", "--checks", "A3",
        "--out", str(tmp_path / "x"),
    ])
    assert rc == 2
    rc = cli.main(["verify", "--checks", "A99", "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "unknown checks" in capsys.readouterr().err


def test_indefinite_scenario_rejected_before_output(tmp_path):
    scen = builtin_scenarios()["scalar-constant"]
    from ergolq.coefficients import PeriodicCoefficientSet, constant_coeff

    kwargs = {k: getattr(scen, k) for k in
              ("tau", "n", "m", "A", "B", "C", "b", "sigma", "S", "R", "q", "rho")}
    kwargs["Q"] = constant_coeff([[-1.0]], scen.tau)
    bad = PeriodicCoefficientSet(**kwargs, name="indefinite")
    path = tmp_path / "bad.ini"
    save_scenario(bad, path)
    out = tmp_path / "x"
    rc = cli.main(["simulate", "--scenario", str(path), "--out", str(out)])
    assert rc == 2
    assert not out.exists()


# ---------------------------------------------------------------------------
# artifacts


def test_simulate_writes_manifest_then_data(tmp_path):
    out = tmp_path / "sim"
    rc = cli.main([
        "simulate", "--scenario", "scalar-moment-decay",
        "--paths", "256", "--periods", "6", "--out", str(out),
    ])
    assert rc == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["manifest.json", "moments.csv", "summary.json", "trajectories.csv"]
    manifest = read_json(out / "manifest.json")
    assert manifest["schema"] == "ergolq-run/1"
    assert manifest["command"] == "simulate"
    assert manifest["config"]["n_paths"] == 256
    assert "numpy" in manifest["versions"]
    summary = read_json(out / "summary.json")
    assert summary["schema"] == "ergolq-summary/1"
    assert summary["scenario"] == "scalar-moment-decay"
    assert summary["seed"] == 7
    assert "lambda_hat" in summary["stability"]
    with open(out / "moments.csv", encoding="utf-8") as fh:
        assert len(fh.readlines()) == 1 + 6 * 64 + 1


def test_simulate_certifies_stability_of_forced_loop(tmp_path):
    # the forced trajectory plateaus at its stationary moment; the verdict
    # must come from the homogeneous loop, which decays at rate 2 here
    out = tmp_path / "sim-forced"
    rc = cli.main([
        "simulate", "--scenario", "scalar-constant",
        "--paths", "512", "--periods", "6", "--out", str(out),
    ])
    assert rc == 0
    stab = read_json(out / "summary.json")["stability"]
    assert stab["stable"] is True
    assert abs(stab["lambda_hat"] - 2.0) < 0.2
    assert read_json(out / "summary.json")["overflow_paths"] == 0


def test_solve_riccati_reports_algebraic_gain(tmp_path):
    out = tmp_path / "ric"
    rc = cli.main([
        "solve-riccati", "--scenario", "scalar-constant",
        "--paths", "1024", "--out", str(out),
    ])
    assert rc == 0
    summary = read_json(out / "summary.json")
    assert summary["k0"][0][0] == pytest.approx(math.sqrt(2.0) - 1.0, abs=1e-6)
    assert summary["n_policies"] <= 10
    assert summary["residual"]["rel_max_defect"] < 1e-3
    assert summary["stability"]["stable"] is True
    assert (out / "riccati_nodes.csv").exists()


def test_ergodic_cost_summary(tmp_path):
    out = tmp_path / "cost"
    rc = cli.main([
        "ergodic-cost", "--scenario", "scalar-constant",
        "--paths", "2048", "--out", str(out),
    ])
    assert rc == 0
    summary = read_json(out / "summary.json")
    assert summary["value"] == pytest.approx(math.sqrt(2.0) - 0.5, abs=1e-4)
    assert abs(summary["gap"]) < 0.05
    assert summary["burn_in_periods"] >= 2
    assert (out / "eta_nodes.csv").exists()


def test_scan_artifacts(tmp_path):
    out = tmp_path / "scan"
    rc = cli.main([
        "scan", "--scenario", "scalar-constant", "--paths", "2000",
        "--eps-grid=-0.15,-0.05,0,0.05,0.15", "--out", str(out),
    ])
    assert rc == 0
    summary = read_json(out / "summary.json")
    assert summary["eps_star"] == 0.0
    assert summary["quadratic_fit"]["curvature"] > 0.0
    with open(out / "scan.csv", encoding="utf-8") as fh:
        rows = fh.readlines()
    assert rows[0].startswith("eps,")
    assert len(rows) == 6


def test_default_out_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("ERGOLQ_OUT_ROOT", str(tmp_path / "root"))
    rc = cli.main([
        "simulate", "--scenario", "scalar-moment-decay",
        "--paths", "128", "--periods", "4",
    ])
    assert rc == 0
    expect = tmp_path / "root" / "simulate-scalar-moment-decay-s7"
    assert (expect / "manifest.json").exists()


# ---------------------------------------------------------------------------
# config layering and reruns


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 11, "n_paths": 512, "scenario": "scalar-constant"}))
    out = tmp_path / "run"
    rc = cli.main([
        "solve-riccati", "--config", str(cfg), "--seed", "12", "--out", str(out),
    ])
    assert rc == 0
    manifest = read_json(out / "manifest.json")
    assert manifest["config"]["seed"] == 12       # flag wins
    assert manifest["config"]["n_paths"] == 512   # file survives


def test_rerun_from_manifest_is_byte_identical(tmp_path):
    out1 = tmp_path / "first"
    rc = cli.main([
        "solve-riccati", "--scenario", "scalar-constant",
        "--paths", "512", "--steps-per-period", "32", "--out", str(out1),
    ])
    assert rc == 0
    out2 = tmp_path / "second"
    rc = cli.main([
        "solve-riccati", "--config", str(out1 / "manifest.json"), "--out", str(out2),
    ])
    assert rc == 0
    for name in ("summary.json", "riccati_nodes.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name


def test_scenario_file_is_embedded_for_reruns(tmp_path):
    path = tmp_path / "model.ini"
    save_scenario(builtin_scenarios()["scalar-constant"], path)
    out1 = tmp_path / "a"
    rc = cli.main([
        "solve-riccati", "--scenario", str(path), "--paths", "512",
        "--steps-per-period", "32", "--out", str(out1),
    ])
    assert rc == 0
    manifest = read_json(out1 / "manifest.json")
    assert manifest["config"]["scenario_text"] is not None
    path.unlink()  # the original file is no longer needed
    out2 = tmp_path / "b"
    rc = cli.main([
        "solve-riccati", "--config", str(out1 / "manifest.json"), "--out", str(out2),
    ])
    assert rc == 0
    assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()


# ---------------------------------------------------------------------------
# verify plumbing


def test_verify_single_check_subset(tmp_path):
    out = tmp_path / "ver"
    rc = cli.main(["verify", "--checks", "A3", "--out", str(out)])
    assert rc == 0
    summary = read_json(out / "summary.json")
    assert summary["passed"] is True
    assert summary["n_checks"] == 1
    assert summary["checks"][0]["check_id"] == "A3"
    with open(out / "checks.csv", encoding="utf-8") as fh:
        lines = fh.readlines()
    assert lines[0].strip() == "check_id,passed,label,detail"
    assert lines[1].startswith("A3,1,")


def test_verify_scenario_battery(tmp_path):
    out = tmp_path / "ver-scen"
    rc = cli.main([
        "verify", "--scenario", "scalar-moment-decay",
        "--paths", "2048", "--out", str(out),
    ])
    assert rc == 0
    summary = read_json(out / "summary.json")
    ids = [c["check_id"] for c in summary["checks"]]
    assert ids == ["S1", "S2", "S3", "S4", "S5", "S6", "A1"]
    assert summary["passed"] is True
    assert summary["n_failed"] == 0
