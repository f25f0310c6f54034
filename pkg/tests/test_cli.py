import json

import numpy as np
import pytest
import yaml

from fastslow.cli import ExperimentConfig, load_config, main, shipped_config
from fastslow.transfer import SlowFields


def write_config(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


SMALL = {"version": 1,
         "system": {"name": "example_family", "params": {"ell": 3, "alpha": 0.05, "beta": 0.05},
                    "epsilon": 1e-2},
         "resolution": {"n_bins": 256, "m": 64},
         "run": {"n_samples": 9000, "times": [0.2], "eps_ladder": [1e-2, 5e-3]}}


def test_shipped_configs_validate():
    for name in ("default", "quick"):
        cfg = load_config(shipped_config(name))
        assert cfg.version == 1


def test_unknown_keys_and_bad_params_rejected(tmp_path, capsys):
    bad = dict(SMALL, run={"bogus": 1})
    assert main(["fields", "--config", write_config(tmp_path / "a.yaml", bad)]) == 2
    bad = dict(SMALL, system={"name": "example_family", "params": {"gamma": 1.0}})
    assert main(["fields", "--config", write_config(tmp_path / "b.yaml", bad)]) == 2
    bad = dict(SMALL, version=2)
    assert main(["fields", "--config", write_config(tmp_path / "c.yaml", bad)]) == 2
    assert "invalid config" in capsys.readouterr().err


def test_json_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(SMALL))
    assert isinstance(load_config(str(path)), ExperimentConfig)


def test_fields_constant_drift_has_zero_variance(tmp_path):
    cfg = {"version": 1,
           "system": {"name": "skew_product",
                      "params": {"fast_amplitude": 0.0, "drift_amplitude": 0.0,
                                 "drift_shift": 0.5}},
           "resolution": {"n_bins": 128, "m": 64},
           "output": {"directory": str(tmp_path / "out")}}
    assert main(["fields", "--config", write_config(tmp_path / "c.yaml", cfg)]) == 0
    f = SlowFields.from_csv(tmp_path / "out" / "fields.csv")
    assert np.all(f.var2 == 0.0)


def test_stationary_from_driftless_fields(tmp_path):
    f = SlowFields.from_functions(lambda t: 0 * t, lambda t: 1 + 0.2 * np.sin(2 * np.pi * t),
                                  m=128)
    f.to_csv(tmp_path / "fields.csv")
    cfg = dict(SMALL, fields_csv=str(tmp_path / "fields.csv"),
               output={"directory": str(tmp_path / "out")})
    assert main(["stationary", "--config", write_config(tmp_path / "c.yaml", cfg)]) == 0
    rep = json.loads((tmp_path / "out" / "stationary.json").read_text())
    assert rep["v_eps"] == 0.0
    assert rep["mass"] == pytest.approx(1.0)


def test_domain_errors_give_exit_status(tmp_path, capsys):
    f = SlowFields.from_functions(lambda t: 0 * t, lambda t: 0 * t, m=64)
    f.to_csv(tmp_path / "fields.csv")
    cfg = dict(SMALL, fields_csv=str(tmp_path / "fields.csv"))
    assert main(["stationary", "--config", write_config(tmp_path / "c.yaml", cfg),
                 "--out", str(tmp_path / "o")]) == 3
    assert "Var^2" in capsys.readouterr().err


def test_outputs_are_byte_identical(tmp_path):
    path = write_config(tmp_path / "c.yaml", SMALL)
    outs = []
    for i, workers in enumerate(("1", "1", "2")):
        d = tmp_path / f"run{i}"
        assert main(["compare", "--config", path, "--out", str(d), "--workers", workers]) == 0
        assert main(["ratefn", "--config", path, "--out", str(d)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outs[0] == outs[1] == outs[2]
    assert set(outs[0]) == {"compare.csv", "compare.json", "ratefn.csv", "ratefn.json"}
    # a different seed changes the Monte Carlo output
    d = tmp_path / "other"
    main(["compare", "--config", path, "--out", str(d), "--seed", "5"])
    assert (d / "compare.csv").read_bytes() != outs[0]["compare.csv"]


def test_foliation_and_lyapunov_subcommands(tmp_path):
    cfg = dict(SMALL, resolution={"n_bins": 256, "m": 64, "n_x": 64, "n_theta": 32,
                                  "leaf_step": 1 / 64, "conjugacy_grid": 243},
               run={"leaves": 3, "orbits": 2, "orbit_steps": 2000})
    path = write_config(tmp_path / "c.yaml", cfg)
    assert main(["foliation", "--config", path, "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "foliation.json").read_text())
    assert rep["obstructed"] and rep["sigma"] < 1
    assert (tmp_path / "conjugacy_theta_0.25.csv").exists()
    assert main(["lyapunov", "--config", path, "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "lyapunov.json").read_text())
    assert rep["formula"] == pytest.approx(2 * np.pi ** 2 * 0.05 / 3, rel=1e-3)
    assert not list(tmp_path.glob(".*.tmp"))


def test_verify_exit_status(tmp_path):
    assert main(["verify", "--quick", "--only", "2", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "acceptance.json").read_text())
    assert rep["all_passed"] and rep["criteria"][0]["number"] == 2
    lines = (tmp_path / "acceptance.csv").read_text().splitlines()
    assert lines[0] == "criterion,name,passed,value,tolerance"
