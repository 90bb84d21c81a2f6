import json
import math
from pathlib import Path

import numpy as np
import pytest

from qrstab.cli import main, parse_args
from qrstab.config import load_config

CONFIGS = Path(__file__).parent.parent / "configs"


def desk_config(**parameters) -> dict:
    config = json.loads((CONFIGS / "desk.json").read_text())
    config["parameters"].update(parameters)
    return config


def run(tmp_path, command, config, *extra) -> tuple[int, dict]:
    source = tmp_path / "config.json"
    if isinstance(config, (dict, list)):
        source.write_text(json.dumps(config))
    else:
        source.write_text(config)
    out = tmp_path / f"{command}.json"
    code = main([command, str(source), "--out", str(out), *extra])
    report = json.loads(out.read_text()) if out.exists() else None
    return code, report


def test_parse_args():
    args = parse_args(["verify", "c.json", "--seed", "7", "-o", "r.json"])
    assert args.command == "verify"
    assert args.seed == 7
    assert args.out == "r.json"
    assert args.cutoff is None
    with pytest.raises(SystemExit):
        parse_args(["certify", "c.json"])


@pytest.mark.parametrize("name", ["desk", "example2", "infeasible", "leak"])
def test_shipped_configs_load(name):
    config = load_config(CONFIGS / f"{name}.json")
    assert config.build_system().n == 2


def test_analyze_desk(tmp_path):
    code, report = run(tmp_path, "analyze", desk_config())
    assert code == 0
    assert report["status"] == "ok"
    assert report["schema_version"] == "1.0"
    certificate = report["certificate"]
    assert certificate["ms_bound"] == pytest.approx(6.0, abs=1e-9)
    assert certificate["gamma_star"] == pytest.approx(3.0, abs=1e-9)
    np.testing.assert_allclose(certificate["Pi"], np.diag([2.0, 1.0]), atol=1e-9)
    np.testing.assert_allclose(report["system"]["steady_covariance"], np.eye(2), atol=1e-9)
    assert report["envelope"]["mu0"] == 0.0


def test_analyze_infeasible(tmp_path):
    config = json.loads((CONFIGS / "infeasible.json").read_text())
    code, report = run(tmp_path, "analyze", config)
    assert code == 2
    assert report["status"] == "infeasible"
    assert report["diagnosis"]["error"] == "Infeasible"
    assert report["diagnosis"]["decay_margin"] < 0
    assert report["certificate"] is None


def test_scan(tmp_path):
    code, report = run(tmp_path, "scan", desk_config(mu1=[0.5, 1.0, 2.0, 5.0], gamma=None))
    assert code == 0
    assert [row["mu1"] for row in report["scan"]] == [0.5, 1.0, 2.0, 5.0]
    feasible = {row["mu1"]: row["feasible"] for row in report["scan"]}
    assert feasible == {0.5: True, 1.0: True, 2.0: True, 5.0: False}
    for row in report["scan"]:
        assert row["decay_margin"] == pytest.approx(4.0 - row["mu1"], abs=1e-9)
    best = min(row["ms_bound"] for row in report["scan"] if row["feasible"])
    assert report["certificate"]["ms_bound"] == pytest.approx(best)


def test_scan_with_scalar_mu1(tmp_path):
    code, report = run(tmp_path, "scan", desk_config(gamma=None))
    assert code == 0
    assert len(report["scan"]) == 1


def test_scan_all_infeasible(tmp_path):
    code, report = run(tmp_path, "scan", desk_config(mu1=[5.0, 6.0], gamma=None))
    assert code == 2
    assert report["status"] == "infeasible"
    assert [margin for _, margin in report["diagnosis"]["margins"]] == pytest.approx([-1.0, -2.0], abs=1e-9)


@pytest.mark.parametrize("config", [
    {"system": {"theta": [["a", 1.0], [-1.0, 0.0]], "R": [[0.0]], "M": [[1.0]], "J": [[0.0]]}},
    {"system": {"theta": [[0.0, 1.0], [-1.0, 0.0]], "R": [[0, 0], [0, 0]], "M": [[1, 0], [0, 1]],
                "J": [[0, 1], [-1, 0]], "extra": 1}},
    "system: [1, 2\n  R: {",
    [1, 2, 3],
], ids=["malformed-number", "unknown-key", "syntax-error", "not-a-mapping"])
def test_bad_configs(tmp_path, capsys, config):
    code, report = run(tmp_path, "analyze", config)
    assert code == 1
    assert report is None
    assert "error" in capsys.readouterr().err


def test_missing_config(tmp_path):
    assert main(["analyze", str(tmp_path / "missing.json")]) == 1


def test_invalid_Q_in_report(tmp_path):
    code, report = run(tmp_path, "analyze", desk_config(Q=[[1.0, 0.0], [0.0, -1.0]]))
    assert code == 1
    assert report["status"] == "error"
    assert report["diagnosis"]["error"] == "InvalidParameter"
    assert "Q" in report["diagnosis"]["message"]


@pytest.mark.parametrize("command", ["analyze", "scan"])
def test_invalid_nus_in_report(tmp_path, command):
    config = json.loads((CONFIGS / "example2.json").read_text())
    config["parameters"]["nus"] = [[1.0, -1.0], [-1.0, 1.0]]
    code, report = run(tmp_path, command, config)
    assert code == 1
    assert report["diagnosis"]["error"] == "InvalidParameter"
    assert "nu" in report["diagnosis"]["message"]


def test_refine_keeps_configured_gamma(tmp_path):
    code, report = run(tmp_path, "analyze", desk_config(gamma=2.0, refine=True))
    assert code == 0
    assert report["certificate"]["gamma"] == 2.0
    assert report["certificate"]["ms_bound"] <= 6.0 + 1e-9


@pytest.mark.parametrize("command", ["analyze", "scan"])
def test_reports_are_deterministic(tmp_path, command):
    config = json.loads((CONFIGS / "example2.json").read_text())
    assert config["parameters"]["refine"]
    first = tmp_path / "first"
    second = tmp_path / "second"
    first.mkdir()
    second.mkdir()
    assert run(first, command, config)[0] == 0
    assert run(second, command, config)[0] == 0
    assert (first / f"{command}.json").read_text() == (second / f"{command}.json").read_text()


def test_singular_theta_in_report(tmp_path):
    config = desk_config()
    config["system"]["theta"] = [[0.0, 0.0], [0.0, 0.0]]
    code, report = run(tmp_path, "analyze", config)
    assert code == 1
    assert report["diagnosis"]["error"] == "SingularTheta"


def test_verify_desk(tmp_path):
    code, report = run(tmp_path, "verify", desk_config(trials=200))
    assert code == 0
    checks = report["oracle"]["checks"]
    assert all(check["passed"] for check in checks.values())
    assert report["oracle"]["block_positivity"]["passed"]


def test_verify_unit_frequency(tmp_path):
    config = desk_config(trials=200)
    config["perturbation"]["terms"] = [{"r": 1.0, "lambda": [1.0, 0.0]}]
    code, report = run(tmp_path, "verify", config)
    assert report["oracle"]["checks"]["zz_assembly"]["passed"]
    assert report["oracle"]["checks"]["zz_assembly"]["residual"] <= 1e-6
    assert code == 0


def test_verify_with_configured_omegas(tmp_path):
    config = desk_config(trials=50, omegas=[0.25])
    config["perturbation"]["terms"] = [{"r": 1.0, "lambda": [0.5, 0.0], "phi": 1.0}]
    code, report = run(tmp_path, "verify", config)
    assert report["oracle"]["checks"]["function_order"]["passed"]
    assert report["envelope"]["omegas"] == [0.25]


def test_verify_rejects_shrunken_envelope(tmp_path):
    code, report = run(tmp_path, "verify", desk_config(trials=200, envelope_scale=0.5))
    assert code == 2
    assert report["status"] == "failed"
    assert not report["oracle"]["block_positivity"]["passed"]
    assert report["oracle"]["block_positivity"]["min_value"] < 0


def test_verify_empty_perturbation(tmp_path):
    config = desk_config(trials=50)
    config["perturbation"]["terms"] = []
    code, report = run(tmp_path, "verify", config)
    assert code == 0
    assert report["oracle"]["block_positivity"]["min_value"] == pytest.approx(0.0, abs=1e-12)


def test_verify_is_deterministic(tmp_path):
    first = tmp_path / "first"
    second = tmp_path / "second"
    first.mkdir()
    second.mkdir()
    config = desk_config(trials=100)
    run(first, "verify", config, "--seed", "3")
    run(second, "verify", config, "--seed", "3")
    assert (first / "verify.json").read_text() == (second / "verify.json").read_text()
    assert json.loads((first / "verify.json").read_text())["seed"] == 3


def test_cutoff_override_is_validated(tmp_path):
    code, report = run(tmp_path, "verify", desk_config(), "--cutoff", "4")
    assert code == 1
    assert report is None


@pytest.mark.slow
def test_simulate_desk(tmp_path):
    trajectory = tmp_path / "trajectory.csv"
    code, report = run(tmp_path, "simulate", desk_config(), "--trajectory", str(trajectory))
    assert code == 0
    oracle = report["oracle"]
    assert oracle["within_envelope"]
    assert oracle["stationary_within_bound"]
    assert oracle["V0"] == pytest.approx(3.0, abs=1e-9)
    assert oracle["nominal_stationary_V"] == pytest.approx(3.0, abs=1e-9)
    assert oracle["dissipation_residual"] <= 6e-3
    assert oracle["max_top_population"] <= 1e-4
    lines = trajectory.read_text().splitlines()
    assert lines[0].startswith("t,V,envelope,P_11")
    assert len(lines) == 502


def test_simulate_cutoff_leak(tmp_path):
    config = json.loads((CONFIGS / "leak.json").read_text())
    code, report = run(tmp_path, "simulate", config)
    assert code == 3
    assert report["status"] == "cutoff_leak"
    assert report["diagnosis"]["cutoff"] == 8
    assert "8" in report["diagnosis"]["advice"]
    assert math.isfinite(report["certificate"]["ms_bound"])


def test_simulate_needs_canonical_theta(tmp_path):
    config = desk_config()
    config["system"]["theta"] = [[0.0, 2.0], [-2.0, 0.0]]
    code, report = run(tmp_path, "simulate", config)
    assert code == 1
    assert report["diagnosis"]["error"] == "NonCanonicalTheta"
    assert report["certificate"] is not None


@pytest.mark.slow
def test_simulate_unperturbed_reaches_steady_state(tmp_path):
    config = desk_config(t_final=3.0, steps=301)
    config["perturbation"]["terms"] = []
    code, report = run(tmp_path, "simulate", config)
    assert code == 0
    oracle = report["oracle"]
    assert oracle["nominal_stationary_V"] == pytest.approx(2.0, abs=1e-9)
    assert oracle["stationary_V"] == pytest.approx(oracle["nominal_stationary_V"], abs=1e-3)
    assert report["certificate"]["ms_bound"] == pytest.approx(4.0, abs=1e-9)
    assert oracle["trajectory_path"] == str(tmp_path / "simulate.csv")
    assert (tmp_path / "simulate.csv").read_text().startswith("t,V,envelope,P_11")
