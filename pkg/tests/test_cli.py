import json
import os

import numpy as np
import pytest
import yaml

from conftest import CACHE_DIR
from widebayes.cli import main


def _write_config(tmp_path, name, cfg):
    path = tmp_path / name
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh)
    return str(path)


THEORY_CFG = {
    "mode": "theory",
    "gamma": 0.5,
    "alpha": [0.4, 0.8, 1.2],
    "delta": 0.1,
    "activation": "he2_he3",
    "prior": "gaussian",
    "readout": {"kind": "rademacher"},
    "eta_max": 60.0,
    "n_eta": 42,
    "seed": 0,
}


def test_theory_mode_writes_schema_and_rows(tmp_path, table_radem05_coarse):
    cfg = dict(THEORY_CFG, out=str(tmp_path / "run"))
    path = _write_config(tmp_path, "t.yaml", cfg)
    rc = main(["theory", "--config", path, "--spectral-cache", CACHE_DIR])
    assert rc == 0
    lines = open(tmp_path / "run.csv").read().splitlines()
    assert lines[0] == "# schema_version=1"
    header = lines[1].split(",")
    assert header[:8] == ["alpha", "gamma", "branch", "f_rs", "q2", "q2_hat", "eps_opt", "mi"]
    assert "qw_0" in header and "qw_hat_1" in header
    alphas = {float(l.split(",")[0]) for l in lines[2:]}
    assert alphas == {0.4, 0.8, 1.2}
    manifest = json.load(open(tmp_path / "run.manifest.json"))
    assert manifest["config"]["alpha"] == [0.4, 0.8, 1.2]
    assert manifest["outputs"] == [str(tmp_path / "run") + ".csv"]


def test_theory_determinism(tmp_path, table_radem05_coarse):
    cfg = dict(THEORY_CFG, alpha=[0.5, 1.0], out=str(tmp_path / "a"))
    path = _write_config(tmp_path, "t.yaml", cfg)
    assert main(["theory", "--config", path, "--spectral-cache", CACHE_DIR]) == 0
    first = open(tmp_path / "a.csv", "rb").read()
    assert main(["theory", "--config", path, "--spectral-cache", CACHE_DIR]) == 0
    assert open(tmp_path / "a.csv", "rb").read() == first


def test_spectrum_mode(tmp_path):
    cfg = {
        "mode": "spectrum",
        "gamma": 0.5,
        "readout": {"kind": "homogeneous"},
        "spectrum": {"etas": [0.0, 1.0], "resolution": 800},
        "out": str(tmp_path / "spec"),
    }
    path = _write_config(tmp_path, "s.yaml", cfg)
    assert main(["spectrum", "--config", path]) == 0
    lines = open(tmp_path / "spec.csv").read().splitlines()
    assert lines[1] == "eta,x,density"
    data = np.array([[float(v) for v in l.split(",")] for l in lines[2:]])
    for eta in (0.0, 1.0):
        sel = data[:, 0] == eta
        assert sel.sum() > 100
        mass = np.trapezoid(data[sel, 2], data[sel, 1])
        assert abs(mass - 1.0) < 5e-3


def test_gamp_mode(tmp_path, table_radem05_coarse):
    cfg = {
        "mode": "gamp",
        "gamma": 0.5,
        "alpha": [0.8],
        "delta": 0.1,
        "activation": "he2_he3",
        "prior": "gaussian",
        "readout": {"kind": "rademacher"},
        "eta_max": 60.0,
        "n_eta": 42,
        "gamp": {"d": 60, "n_instances": 1, "n_test": 5000},
        "seed": 1,
        "out": str(tmp_path / "g"),
    }
    path = _write_config(tmp_path, "g.yaml", cfg)
    assert main(["gamp", "--config", path, "--spectral-cache", CACHE_DIR]) == 0
    lines = open(tmp_path / "g.csv").read().splitlines()
    assert lines[1] == "alpha,test_mse,se_q2,iterations,seed"
    assert len(lines) == 3


def test_mcmc_mode(tmp_path, table_radem05_coarse):
    cfg = {
        "mode": "mcmc",
        "gamma": 0.5,
        "alpha": [0.4],
        "delta": 1.25,
        "activation": "he2",
        "prior": "rademacher",
        "readout": {"kind": "rademacher"},
        "eta_max": 60.0,
        "n_eta": 42,
        "mcmc": {"sampler": "metropolis", "d": 16, "sweeps": 30, "snapshot_every": 10},
        "seed": 3,
        "out": str(tmp_path / "m"),
    }
    path = _write_config(tmp_path, "m.yaml", cfg)
    assert main(["mcmc", "--config", path, "--spectral-cache", CACHE_DIR]) == 0
    lines = open(tmp_path / "m.csv").read().splitlines()
    assert lines[1].startswith("iter,energy,acceptance,q2,Q_1")
    assert len(lines) == 5  # 3 snapshots + header lines


def test_config_error_unknown_key(tmp_path):
    path = _write_config(tmp_path, "bad.yaml", {"mode": "theory", "bogus": 1})
    assert main(["theory", "--config", path]) == 1


def test_config_error_mode_mismatch(tmp_path):
    path = _write_config(tmp_path, "t.yaml", dict(THEORY_CFG, out=str(tmp_path / "x")))
    assert main(["phase", "--config", path]) == 1


def test_config_error_missing_file():
    assert main(["theory", "--config", "/nonexistent.yaml"]) == 1


def test_config_error_decreasing_alpha(tmp_path):
    cfg = dict(THEORY_CFG, alpha=[1.0, 0.5], out=str(tmp_path / "x"))
    path = _write_config(tmp_path, "t.yaml", cfg)
    assert main(["theory", "--config", path, "--spectral-cache", CACHE_DIR]) == 1
