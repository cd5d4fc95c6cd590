import json

import numpy as np
import pytest

from viable_mfg.cli import main
from viable_mfg.fields import read_field

MONOTONE = {
    "T": 0.5,
    "seed": 11,
    "domain": {"kind": "interval", "bounds": [0, 1]},
    "diffusion": {"kind": "wright_fisher"},
    "hamiltonian": {"type": "example1", "M": 2, "control_radius": 1},
    "coupling_F": {"mode": "local", "kind": "linear", "scale": 1.0},
    "coupling_G": {"kind": "zero"},
    "m0": {"kind": "uniform"},
    "solver": {"h": 0.0625, "dt": 0.01, "tol": 1e-8},
    "sde": {"n_paths": 500, "sweep_dt": [0.01, 0.001], "drift_mode": "feedback"},
    "invariance": {"condition": "hjb", "delta": 0.1},
    "certify": {"gap_tol": 1e-3, "exit_tol": 0.02},
}


def write(tmp_path, cfg, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=2))
    return str(path)


def test_solve_hjb_constant_terminal_data(tmp_path):
    cfg = {**MONOTONE, "coupling_F": {"kind": "zero"}, "coupling_G": {"kind": "constant", "value": 1.5}}
    out = tmp_path / "u.field"
    assert main(["solve-hjb", "--config", write(tmp_path, cfg), "--out", str(out), "--csv", str(tmp_path / "u.csv")]) == 0
    u = read_field(out)
    np.testing.assert_allclose(u.values, 1.5, atol=1e-12)
    manifest = json.loads((tmp_path / "u.field.manifest.json").read_text())
    assert manifest["exit_status"] == 0 and len(manifest["config_sha256"]) == 64 and manifest["seed"] == 11


def test_missing_T_is_a_config_error(tmp_path, capsys):
    cfg = {k: v for k, v in MONOTONE.items() if k != "T"}
    assert main(["solve-hjb", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "u.field")]) == 2
    assert "'T'" in capsys.readouterr().err


def test_unknown_key_reports_field_and_line(tmp_path, capsys):
    cfg = {**MONOTONE, "solver": {**MONOTONE["solver"], "omega": 1}}
    assert main(["solve-mfg", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "s")]) == 2
    err = capsys.readouterr().err
    assert "solver.omega" in err and "line" in err


def test_out_of_range_value_is_rejected(tmp_path):
    cfg = {**MONOTONE, "solver": {**MONOTONE["solver"], "damping": 1.5}}
    assert main(["solve-mfg", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "s")]) == 2


def test_solver_error_maps_to_exit_3(tmp_path):
    cfg = {**MONOTONE, "hamiltonian": {"type": "quadratic"}}
    assert main(["solve-mfg", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "s")]) == 3


def test_solve_mfg_writes_outputs_and_is_reproducible(tmp_path):
    c = write(tmp_path, MONOTONE)
    for d in ("a", "b"):
        assert main(["solve-mfg", "--config", c, "--out", str(tmp_path / d)]) == 0
    for name in ("u.field", "m.field"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    diag = json.loads((tmp_path / "a" / "diagnostics.json").read_text())
    assert diag["converged"]
    assert (tmp_path / "a" / "residuals.csv").read_text().startswith("iteration,residual")


def test_check_invariance_verdicts(tmp_path):
    c = write(tmp_path, MONOTONE)
    out = tmp_path / "inv.json"
    assert main(["check-invariance", "--config", c, "--out", str(out), "--csv", str(tmp_path / "m.csv")]) == 0
    assert json.loads(out.read_text())["verdict"] == "pass"
    cfg = {**MONOTONE, "diffusion": {"kind": "constant", "scale": 0.1}, "hamiltonian": {"type": "quadratic"}}
    assert main(["check-invariance", "--config", write(tmp_path, cfg, "bad.json"), "--out", str(out)]) == 4


def test_solve_fp_and_simulate_sde(tmp_path):
    cfg = {**MONOTONE, "dynamics": {"kind": "inward", "M": 1.0}, "sde": {"n_paths": 200, "dt": 0.01}}
    c = write(tmp_path, cfg)
    assert main(["solve-fp", "--config", c, "--out", str(tmp_path / "m.field")]) == 0
    m = read_field(tmp_path / "m.field")
    assert np.ptp(m.mass()) <= 1e-12
    assert main(["simulate-sde", "--config", c, "--out", str(tmp_path / "s.json"),
                 "--store-paths", str(tmp_path / "p.bin")]) == 0
    stats = json.loads((tmp_path / "s.json").read_text())
    assert stats["n_paths"] == 200 and (tmp_path / "p.bin").exists()


def test_figures_flag_writes_png(tmp_path):
    c = write(tmp_path, MONOTONE)
    assert main(["solve-hjb", "--config", c, "--out", str(tmp_path / "u.field"), "--figures"]) == 0
    assert (tmp_path / "u.png").read_bytes()[:4] == b"\x89PNG"


@pytest.mark.slow
def test_certify_monotone_fixture(tmp_path):
    out = tmp_path / "cert.json"
    assert main(["certify", "--config", write(tmp_path, MONOTONE), "--out", str(out)]) == 0
    cert = json.loads(out.read_text())
    assert cert["passed"] and cert["checks"]["invariance"]
    assert cert["duality_gap"]["relative"] <= 1e-3
    assert [row["dt"] for row in cert["sde"]["table"]] == [0.01, 0.001]
