import json

import numpy as np
import pytest

from phasefield_moments.cli import main
from phasefield_moments.linear_control import FourierState
from phasefield_moments.spectral import resonant_xi


def _cfg(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _load(path):
    return json.loads(path.read_text())


def test_spectrum_ok(tmp_path):
    out = tmp_path / "o"
    assert main(["spectrum", "--config", _cfg(tmp_path, "xi = 1.0\nrho = 1.0\ntau = 2.0\nN = 8\n"), "--out", str(out)]) == 0
    d = _load(out / "spectrum.json")
    assert d["hypotheses"]["H1"] and d["hypotheses"]["H2"]
    assert len(d["spectrum"]["Lambda"]) == 16
    assert (out / "spectrum.csv").read_text().startswith("# phasefield_moments")


def test_spectrum_h1_failure(tmp_path):
    cfg = _cfg(tmp_path, "xi = 0.5\nrho = 1.0\ntau = 2.0\n")
    assert main(["spectrum", "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert _load(tmp_path / "o" / "spectrum.json")["hypotheses"]["violating_j"] == 1


def test_spectrum_h2_failure(tmp_path):
    cfg = _cfg(tmp_path, f"xi = {resonant_xi(1.0, 2.0, 1, 2)!r}\nrho = 1.0\ntau = 2.0\n")
    assert main(["spectrum", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert [1, 2] in _load(tmp_path / "o" / "spectrum.json")["hypotheses"]["H2_witnesses"]


@pytest.mark.parametrize(
    "text", ["xi = -1.0\n", "N = 2.5\n", "bogus = 1\n", "c = 3\n", "M = 'big'\n", "xi = [\n"]
)
def test_config_errors(tmp_path, text):
    assert main(["spectrum", "--config", _cfg(tmp_path, text), "--out", str(tmp_path / "o")]) == 1


def test_missing_config(tmp_path):
    assert main(["spectrum", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path / "o")]) == 1


def test_control_linear_zero_datum(tmp_path):
    y0 = tmp_path / "y0.json"
    y0.write_text(json.dumps({"coeffs": [[0.0, 0.0]]}))
    cfg = _cfg(tmp_path, "N = 6\nT = 0.5\n")
    assert main(["control-linear", "--config", cfg, "--y0", str(y0), "--out", str(tmp_path / "o")]) == 0
    rep = _load(tmp_path / "o" / "report.json")["result"]
    assert rep["terminal_norm_H-1"] == 0 and rep["v_l2"] == 0


def test_control_linear_demo_and_determinism(tmp_path):
    args = ["control-linear", "--patch-horizon", "0.25", "--seed", "4", "--config",
            _cfg(tmp_path, "N = 16\nT = 0.5\nrandom_trials = 2\n")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    rep = _load(tmp_path / "a" / "report.json")
    assert rep["result"]["terminal_ratio"] <= 1e-4
    assert all(r["terminal_ratio"] <= 1e-4 for r in rep["random_trials"])
    for name in ("report.json", "control.csv", "control.json", "closed_loop.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert rep["header"]["config_sha256"] and rep["header"]["versions"]["mpmath"]


def test_ucp_failure_demo(tmp_path):
    cfg = _cfg(tmp_path, f"xi = {resonant_xi(1.0, 2.0, 1, 2)!r}\nrho = 1.0\ntau = 2.0\nN = 4\n")
    code = main(["control-linear", "--config", cfg, "--demonstrate-ucp-failure", "--out", str(tmp_path / "o")])
    assert code == 2
    wit = _load(tmp_path / "o" / "ucp_witness.json")["witnesses"]
    assert wit and all(w["verified"] and abs(w["norm_H1"] - 1) < 1e-12 for w in wit)


def test_precision_exit(tmp_path):
    cfg = _cfg(tmp_path, "N = 32\nT = 0.1\nprecision_bits = 64\nmax_bits = 128\n")
    assert main(["control-linear", "--config", cfg, "--out", str(tmp_path / "o")]) == 4
    assert "bits" in _load(tmp_path / "o" / "report.json")


def test_cost_sweep(tmp_path):
    cfg = _cfg(tmp_path, "N = 6\nN_probe = 6\nT_list = [0.3, 0.5, 0.8]\n")
    assert main(["cost-sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    fit = _load(tmp_path / "o" / "cost.json")["sweep"]["fit"]
    assert fit["M_fit"] > 0


def test_control_nonlinear_demo(tmp_path):
    cfg = _cfg(tmp_path, "T = 1.0\nN = 1\nM = 0.7\ny0 = [[1e-3, 1e-3]]\n")
    assert main(["control-nonlinear", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    man = _load(tmp_path / "o" / "manifest.json")
    assert man["converged"] and man["contraction_est"] < 1
    assert (tmp_path / "o" / "iterations.csv").exists()


def test_simulate_free_decay_from_physical_samples(tmp_path):
    y = FourierState.mode(4, 2, [0.5, -0.25])
    x, vals = y.to_physical(64)
    lines = ["theta,phi"] + [f"{float(a)!r},{float(b)!r}" for a, b in vals]
    (tmp_path / "y0.csv").write_text("\n".join(lines))
    cfg = _cfg(tmp_path, "N = 4\nT = 0.3\nsteps = 64\n")
    assert main(["simulate", "--config", cfg, "--y0", str(tmp_path / "y0.csv"), "--out", str(tmp_path / "o")]) == 0
    sim = _load(tmp_path / "o" / "simulation.json")
    assert np.allclose(sim["simulation"]["states"][0], y.coeffs, atol=1e-12)
    assert sim["terminal_norm_H-1"] < y.norm()


def test_simulate_with_control_file(tmp_path):
    cfg = _cfg(tmp_path, "N = 4\nT = 0.5\n")
    assert main(["control-linear", "--config", cfg, "--out", str(tmp_path / "c")]) == 0
    assert main(["simulate", "--config", cfg, "--v", str(tmp_path / "c" / "control.json"), "--out", str(tmp_path / "s")]) == 0
    assert _load(tmp_path / "s" / "simulation.json")["terminal_norm_H-1"] <= 1e-8
