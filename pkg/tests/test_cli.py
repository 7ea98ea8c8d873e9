import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from ntdrecon.cli import (
    EXIT_RECONSTRUCTION,
    EXIT_SOLVER,
    EXIT_VALIDATION,
    exit_code_for,
    main,
    parse_tensor,
)
from ntdrecon.errors import (
    ConvergenceError,
    DomainError,
    NonflatAssumptionError,
    NtdError,
    SearchFailedError,
    ValidationError,
)

INCLUSION = {"center": [0.5, 0.5, 0.5], "radius": 0.25}


def run_cli(tmp_path, command, config, name="out", seed=0, extra=()):
    cfg_path = tmp_path / f"{name}.json"
    cfg_path.write_text(json.dumps(config))
    out = tmp_path / name
    code = main([command, "--config", str(cfg_path), "--out", str(out), "--seed", str(seed), *extra])
    report = json.loads((out / "report.json").read_text())
    return code, report, out


def test_forward_writes_outputs(tmp_path):
    cfg = {"geometry": {"n": 4, "inclusion": INCLUSION}, "coefficients": {"gamma1": 2.0}}
    code, rep, out = run_cli(tmp_path, "forward", cfg)
    assert code == 0 and rep["status"] == "ok"
    assert rep["result"]["c0"] > 0
    assert rep["result"]["energy_inequality"]["holds"]
    assert len(rep["config_hash"]) == 64
    for f in ("solution.csv", "residuals.csv", "provenance.json"):
        assert (out / f).exists()
    prov = json.loads((out / "provenance.json").read_text())
    assert prov["config_hash"] == rep["config_hash"]
    assert prov["kernel_backend"] in ("cython", "python")


def test_zero_data_forward(tmp_path):
    cfg = {"geometry": {"n": 3}, "boundary_data": {"kind": "constant", "value": 0.0}}
    code, rep, _ = run_cli(tmp_path, "forward", cfg)
    assert code == 0 and rep["result"]["norms"]["linf"] == 0.0


def test_same_seed_same_report(tmp_path):
    cfg = {"geometry": {"n": 4}, "frechet": {"directions": 2}}
    _, a, _ = run_cli(tmp_path, "frechet", cfg, name="a", seed=7)
    _, b, _ = run_cli(tmp_path, "frechet", cfg, name="b", seed=7)
    _, c, _ = run_cli(tmp_path, "frechet", cfg, name="c", seed=8)
    assert a == b
    assert a["result"]["runs"][0]["errors"] != c["result"]["runs"][0]["errors"]
    assert a["config_hash"] != c["config_hash"]
    assert a["result"]["first_order"]


def test_validation_exit_codes(tmp_path):
    code, rep, _ = run_cli(tmp_path, "forward", {"coefficients": {"lambda0": 1.5}}, name="lam")
    assert code == EXIT_VALIDATION and rep["stage"] == "config"
    code, rep, _ = run_cli(tmp_path, "forward", {"coefficients": {"gamma0": 3.0}}, name="ell")
    assert code == EXIT_VALIDATION and rep["stage"] == "config"
    code, _, _ = run_cli(tmp_path, "forward", {"bogus": {}}, name="unk")
    assert code == EXIT_VALIDATION
    code, _, _ = run_cli(tmp_path, "frechet", {"frechet": {"taus": [0.1, 0.2]}}, name="tau")
    assert code == EXIT_VALIDATION
    code, _, _ = run_cli(tmp_path, "forward", {"geometry": {"inclusion": {"center": [0.5] * 3, "radius": 0.9}}},
                         name="incl")
    assert code == EXIT_VALIDATION


def test_unreadable_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = main(["forward", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == EXIT_VALIDATION


def test_bad_seed_and_threads(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{}")
    assert main(["forward", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "-1"]) == EXIT_VALIDATION
    assert main(["forward", "--config", str(cfg), "--out", str(tmp_path / "o"), "--threads", "0"]) == EXIT_VALIDATION


def test_solver_failure_exit_code(tmp_path):
    cfg = {"geometry": {"n": 3}, "boundary_data": {"value": 5.0}, "solver": {"newton_max_iter": 1}}
    code, rep, _ = run_cli(tmp_path, "forward", cfg)
    assert code == EXIT_SOLVER and rep["error"] == "ConvergenceError"


def test_flat_inclusion_rejected(tmp_path):
    cfg = {"geometry": {"inclusion": {"kind": "box", "lo": [0.25] * 3, "hi": [0.75] * 3}},
           "coefficients": {"gamma1": 2.0},
           "reconstruct": {"mode": "exact", "search_radius": 0.2}}
    code, rep, _ = run_cli(tmp_path, "recover-inclusion", cfg)
    assert code == EXIT_RECONSTRUCTION
    assert rep["error"] == "NonflatAssumptionError" and rep["stage"] == "frame"


def test_recover_boundary_exact_mode(tmp_path):
    gamma = {"diag": [2.0, 1.0, 1.0], "rotate": {"axis": [0, 0, 1], "degrees": 30}}
    cfg = {"geometry": {"kind": "ball", "refinement": 3}, "coefficients": {"gamma0": gamma},
           "reconstruct": {"mode": "exact"}}
    code, rep, out = run_cli(tmp_path, "recover-boundary", cfg)
    assert code == 0
    assert rep["result"]["errors"]["gamma0"]["relative_frobenius"] < 1e-8
    assert len((out / "stages.csv").read_text().splitlines()) == 10


def test_mms_and_ntd(tmp_path):
    code, rep, out = run_cli(tmp_path, "mms", {"mms": {"ns": [4, 8]}}, name="mms")
    assert code == 0
    assert 1.7 <= rep["result"]["rates"]["semilinear"]["l2"][0] <= 2.3
    assert (out / "mms.csv").exists()
    code, rep, out = run_cli(tmp_path, "ntd", {"geometry": {"kind": "ball", "refinement": 2}}, name="ntd")
    assert code == 0 and rep["result"]["weighted_symmetry_residual"] < 1e-8
    d = json.loads((out / "ntd.json").read_text())
    assert len(d["values"]) == d["dimension"] ** 2


def test_probe(tmp_path):
    cfg = {"geometry": {"n": 4}, "probe": {"refine_h": 0.03}, "boundary_data": {"value": 0.01}}
    code, rep, out = run_cli(tmp_path, "probe", cfg)
    assert code == 0
    vals = np.array(rep["result"]["values"])
    assert np.all(np.diff(vals) < 0)
    assert (out / "probe.csv").exists()


def test_distinguish(tmp_path):
    cfg = {"geometry": {"inclusion": INCLUSION}, "coefficients": {"lambda0": 0.3}}
    code, rep, out = run_cli(tmp_path, "distinguish", cfg)
    assert code == 0
    assert rep["result"]["identical_gap"] == 0.0 and rep["result"]["strictly_increasing"]
    assert (out / "distinguish.csv").exists()


def test_contrast_outside_ellipticity_rejected(tmp_path):
    cfg = {"geometry": {"inclusion": INCLUSION}}
    code, rep, _ = run_cli(tmp_path, "distinguish", cfg)
    assert code == EXIT_VALIDATION and rep["stage"] == "config"


def test_parse_tensor_forms():
    assert np.allclose(parse_tensor(2.0).matrix, 2 * np.eye(3))
    assert np.allclose(parse_tensor([1, 2, 3]).matrix, np.diag([1, 2, 3]))
    assert np.allclose(parse_tensor([[2, 0.1, 0], [0.1, 1, 0], [0, 0, 1]]).matrix[0, 1], 0.1)
    assert parse_tensor([2, 0, 0, 1, 0, 1]).matrix[0, 0] == 2
    rot = parse_tensor({"diag": [2, 1, 1], "rotate": {"axis": [0, 0, 1], "degrees": 90}})
    assert np.allclose(rot.matrix, np.diag([1, 2, 1]), atol=1e-14)
    with pytest.raises(ValidationError):
        parse_tensor([1, -1, 1])
    with pytest.raises(ValidationError):
        parse_tensor("x")


def test_exit_code_mapping():
    assert exit_code_for(DomainError("x")) == EXIT_VALIDATION
    assert exit_code_for(ConvergenceError("x")) == EXIT_SOLVER
    assert exit_code_for(NonflatAssumptionError("x")) == EXIT_RECONSTRUCTION
    assert exit_code_for(SearchFailedError("x")) == EXIT_RECONSTRUCTION
    assert exit_code_for(NtdError("x", stage="background")) == EXIT_SOLVER


@pytest.mark.skipif(shutil.which("ntdrecon") is None, reason="console script not installed")
def test_console_script(tmp_path):
    out = subprocess.run(["ntdrecon", "--version"], capture_output=True, text=True, check=True)
    assert out.stdout.startswith("ntdrecon ")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"geometry": {"n": 3}}))
    res = subprocess.run([sys.executable, "-m", "ntdrecon.cli", "forward", "--config", str(cfg),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0 and "ok" in res.stdout
