import json
from pathlib import Path

import numpy as np
import pytest

from spdelab.cli import main
from spdelab.config import ConfigError, config_from_dict, load_config, override
from spdelab.runner import run_experiment

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def test_load_and_validate_sample_configs():
    for name in ("resolvent.toml", "morrey.toml", "ito.toml",
                 "energy_singular_drift.toml", "stability.toml",
                 "gaussian.toml", "lp.toml", "w1p.toml"):
        cfg = load_config(CONFIGS / name)
        assert cfg.kind


def test_config_error_reporting(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[experiment]\nkind = 'no-such-kind'\n")
    with pytest.raises(ConfigError) as err:
        load_config(bad)
    assert "kind" in str(err.value)

    bad.write_text("[experiment]\nkind = 'energy'\n[triple]\ndim = 3\n"
                   "[noise]\ndt = 0.02\nt_final = 0.05\n")
    with pytest.raises(ConfigError) as err:
        load_config(bad)
    assert "t_final" in str(err.value)

    bad.write_text("not toml at all ===")
    with pytest.raises(ConfigError) as err:
        load_config(bad)
    assert "parse error" in str(err.value)


def test_unknown_field_kind_rejected(tmp_path):
    raw = {
        "experiment": {"kind": "energy"},
        "triple": {"dim": 1},
        "noise": {"dt": 0.01, "t_final": 0.1},
        "forcing": {"f": {"kind": "mystery"}},
    }
    with pytest.raises(ConfigError) as err:
        config_from_dict(raw)
    assert "mystery" in str(err.value)


def test_override_deepcopy():
    raw = {"noise": {"dt": 0.01}}
    out = override(raw, "noise.dt", 0.005)
    assert raw["noise"]["dt"] == 0.01
    assert out["noise"]["dt"] == 0.005
    out2 = override(raw, "coefficients.b.singular.amplitude", 0.1)
    assert out2["coefficients"]["b"]["singular"]["amplitude"] == 0.1


def test_cli_validate_and_run_resolvent(tmp_path, capsys):
    rc = main(["validate", str(CONFIGS / "resolvent.toml")])
    assert rc == 0
    out = tmp_path / "res"
    rc = main(["run", str(CONFIGS / "resolvent.toml"), "--output", str(out)])
    assert rc == 0
    report = read_json(out / "report.json")
    assert report["passed"] is True
    manifest = read_json(out / "manifest.json")
    assert set(manifest["files"]) == {"manifest.json", "report.json",
                                      "smoothing.csv"}
    for name in manifest["files"]:
        assert (out / name).exists()


def test_cli_missing_config_returns_one(tmp_path):
    rc = main(["run", str(tmp_path / "nope.toml")])
    assert rc == 1


def test_cli_gate_refusal_exit_two(tmp_path):
    cfg_text = (CONFIGS / "energy_singular_drift.toml").read_text()
    cfg_text = cfg_text.replace("amplitude = 0.04", "amplitude = 2.0")
    bad = tmp_path / "gate.toml"
    bad.write_text(cfg_text)
    rc = main(["run", str(bad), "--output", str(tmp_path / "out")])
    assert rc == 2


def test_cli_divergence_exit_three(tmp_path):
    raw = (CONFIGS / "energy_singular_drift.toml").read_text()
    raw = raw.replace("divergence_guard = 1e12", "")
    raw += "\n[scheme]\ndivergence_guard = 1e-8\n"
    bad = tmp_path / "div.toml"
    bad.write_text(raw)
    rc = main(["run", str(bad), "--output", str(tmp_path / "out")])
    assert rc == 3


def test_reproducible_reports(tmp_path):
    cfg = load_config(CONFIGS / "lp.toml")
    out1, out2 = tmp_path / "a", tmp_path / "b"
    run_experiment(cfg, out1)
    run_experiment(cfg, out2)
    assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
    assert (out1 / "norms.csv").read_bytes() == (out2 / "norms.csv").read_bytes()
    # manifests agree apart from the wall-clock field
    m1, m2 = read_json(out1 / "manifest.json"), read_json(out2 / "manifest.json")
    m1.pop("wall_clock"), m2.pop("wall_clock")
    assert m1 == m2


def test_gaussian_benchmark_run_contains_power_fit(tmp_path):
    raw = {
        "experiment": {"kind": "gaussian-benchmark"},
        "benchmark": {"dim": 1, "box_length": 24.0, "grid_points": 256,
                      "times": [0.5, 1.0, 2.0], "seed": 3},
    }
    cfg = config_from_dict(raw)
    report, manifest = run_experiment(cfg, tmp_path / "g")
    assert abs(report["l2_power_fit"] - 0.5) < 1e-3
    assert report["sharpness"]["estimate_violated"]
    assert "benchmark.csv" in manifest.files


def test_sweep_dt_on_ito(tmp_path):
    raw = {
        "experiment": {"kind": "ito-suite"},
        "noise": {"dt": 1e-2, "t_final": 0.5, "n_paths": 300, "seed": 1},
    }
    cfg = config_from_dict(raw)
    from spdelab.runner import sweep_experiment
    out = tmp_path / "sweep"
    out.mkdir()
    rep = sweep_experiment(cfg, "dt", [1e-2, 5e-3, 2.5e-3], out)
    col = rep["headers"].index("mean_max_residual")
    vals = [row[col] for row in rep["rows"]]
    assert vals[0] > vals[1] > vals[2]
    # halving dt should roughly halve the residual, within sampling noise
    assert abs(vals[1] / vals[0] - 0.5) < 0.2
    assert (out / "sweep.csv").exists()


def test_sweep_unknown_parameter(tmp_path):
    raw = {"experiment": {"kind": "ito-suite"},
           "noise": {"dt": 1e-2, "t_final": 0.1}}
    cfg = config_from_dict(raw)
    from spdelab.runner import sweep_experiment
    with pytest.raises(ConfigError) as err:
        sweep_experiment(cfg, "bogus", [1, 2], tmp_path)
    assert "aliases" in str(err.value)


def test_field_file_reference_in_config(tmp_path):
    from spdelab.fields import gaussian_bump, save_field
    from spdelab.runner import build_scalar_field, build_triple

    raw = {
        "experiment": {"kind": "energy"},
        "triple": {"dim": 2, "grid_points": 16, "box_length": 1.0},
        "noise": {"dt": 0.01, "t_final": 0.1},
    }
    cfg = config_from_dict(raw)
    triple = build_triple(cfg)
    ref = gaussian_bump(triple, width=0.2)
    path = tmp_path / "u0.bin"
    save_field(path, ref, triple.box_length)
    built = build_scalar_field({"kind": "file", "path": str(path)}, triple)
    assert np.array_equal(built, ref)

    # validation rejects configs pointing at a missing field file
    raw["initial"] = {"kind": "file", "path": str(tmp_path / "missing.bin")}
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_cli_sweep_epsilon_on_stability(tmp_path):
    out = tmp_path / "sw"
    rc = main(["sweep", str(CONFIGS / "stability.toml"), "--param", "epsilon",
               "--values", "0.25,0.0625,0.015625", "--output", str(out)])
    assert rc == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    header = lines[0].split(",")
    col = header.index("d_values.0")
    vals = [float(line.split(",")[col]) for line in lines[1:]]
    assert vals[0] > vals[1] > vals[2]
