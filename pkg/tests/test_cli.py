import json
import subprocess
import sys

import numpy as np
import pytest

from roughdensity.cli import main
from roughdensity.paths import load_ensemble
from roughdensity.runner import (
    EXIT_CONFIG,
    EXIT_FAIL,
    EXIT_GATE,
    EXIT_PASS,
    config_hash,
    run,
    summarize,
    validate_config,
)


def write_config(tmp_path, config, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return path


HYP_OK = {"kernel": {"family": "fbm", "H": 0.4, "T": 1.0},
          "grid": {"n_steps": 64}, "experiment": "hypotheses", "seed": 1}

HYP_BAD = {"kernel": {"family": "fbm", "H": 0.7, "T": 2.0, "rho": 1.0},
           "grid": {"n_steps": 16}, "experiment": "hypotheses", "seed": 1}

DENSITY_SMALL = {
    "kernel": {"family": "fbm", "H": 0.5, "T": 1.0, "rho": 1.0},
    "grid": {"n_steps": 32},
    "vf": {"name": "identity", "params": {"n": 1}},
    "experiment": "density", "seed": 3, "n_paths": 4000, "eps": 1.0,
}


def test_hypotheses_run_passes(tmp_path):
    code = run(HYP_OK, str(tmp_path / "out"))
    assert code == EXIT_PASS
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["pass"] is True
    rep = report["result"]["hypothesis_report"]
    assert rep["negative_correlation"]["pass"] is True


def test_hypotheses_run_fails_with_witness(tmp_path):
    code = run(HYP_BAD, str(tmp_path / "out"))
    assert code == EXIT_FAIL
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["pass"] is False
    nc = report["result"]["hypothesis_report"]["negative_correlation"]
    assert nc["pass"] is False
    assert nc["witness"] == [0.0, 1.0, 1.0, 2.0]
    want = 0.5 * (2.0 ** 1.4 - 2.0)
    assert nc["worst"] == pytest.approx(want, rel=1e-12)


def test_malformed_json_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = main(["run", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG


def test_schema_violation_exits_2(tmp_path):
    cfg = write_config(tmp_path, {"kernel": {"family": "fbm", "H": 0.4},
                                  "experiment": "nope"})
    code = main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    with pytest.raises(Exception):
        validate_config({"kernel": {"family": "fbm"}, "experiment": "nope"})


def test_gated_experiment_exits_3(tmp_path):
    config = dict(DENSITY_SMALL)
    config["kernel"] = {"family": "fbm", "H": 0.7, "T": 1.0, "rho": 1.0}
    config["grid"] = {"n_steps": 16}
    code = run(config, str(tmp_path / "out"))
    assert code == EXIT_GATE
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["pass"] is False
    assert report["gate"]["pass"] is False


def test_density_run_and_report(tmp_path):
    out = tmp_path / "out"
    code = run(DENSITY_SMALL, str(out))
    assert code == EXIT_PASS
    assert (out / "density.csv").exists()
    table = np.loadtxt(out / "density.csv", delimiter=",", skiprows=1)
    assert table.shape[1] == 3
    text = summarize(str(out))
    assert "PASS" in text and "tail slope" in text


def test_report_missing_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        summarize(str(tmp_path))
    assert main(["report", str(tmp_path)]) == 1


def test_sample_experiment_writes_ensemble(tmp_path):
    config = {"kernel": {"family": "fbm", "H": 0.4, "T": 1.0},
              "grid": {"n_steps": 32}, "experiment": "sample",
              "seed": 5, "n_paths": 2000, "d": 2}
    out = tmp_path / "out"
    assert run(config, str(out)) == EXIT_PASS
    ens = load_ensemble(str(out / "ensemble.bin"))
    assert ens.n_paths == 2000 and ens.d == 2
    assert (out / "path0.csv").exists()


def test_rerun_is_byte_identical_across_workers(tmp_path):
    blobs = []
    for i, workers in enumerate((1, 4, 16)):
        out = tmp_path / f"out{i}"
        assert run(DENSITY_SMALL, str(out), workers=workers) == EXIT_PASS
        blobs.append((out / "report.json").read_bytes())
    assert blobs[0] == blobs[1] == blobs[2]
    # and a plain re-run reproduces bytes too
    out = tmp_path / "again"
    run(DENSITY_SMALL, str(out), workers=2)
    assert (out / "report.json").read_bytes() == blobs[0]


def test_config_hash_stable_under_key_order():
    a = {"kernel": {"family": "fbm", "H": 0.4}, "experiment": "hypotheses"}
    b = {"experiment": "hypotheses", "kernel": {"H": 0.4, "family": "fbm"}}
    assert config_hash(a) == config_hash(b)


def test_cli_entry_point_subprocess(tmp_path):
    cfg = write_config(tmp_path, HYP_OK)
    out = tmp_path / "artifacts"
    proc = subprocess.run(
        [sys.executable, "-m", "roughdensity.cli", "run", "--config",
         str(cfg), "--out", str(out), "--workers", "2", "--verbose"],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "PASS" in proc.stdout
    proc2 = subprocess.run(
        [sys.executable, "-m", "roughdensity.cli", "report", str(out)],
        capture_output=True, text=True)
    assert proc2.returncode == 0
    assert "c_X" in proc2.stdout


def test_list_fixtures(capsys):
    assert main(["list-fixtures"]) == 0
    out = capsys.readouterr().out
    assert "bounded_nonlinear" in out and "fbm" in out


def test_audit_interpolation_experiment(tmp_path):
    config = {"kernel": {"family": "fbm", "H": 0.4, "T": 1.0},
              "grid": {"n_steps": 32}, "experiment": "audit-interpolation",
              "seed": 7, "n_paths": 25}
    assert run(config, str(tmp_path / "out")) == EXIT_PASS


def test_audit_malliavin_experiment(tmp_path):
    config = {"kernel": {"family": "fbm", "H": 0.4, "T": 1.0},
              "grid": {"n_steps": 128},
              "vf": {"name": "bounded_nonlinear"},
              "experiment": "audit-malliavin", "seed": 9, "n_pairs": 5}
    out = tmp_path / "out"
    assert run(config, str(out)) == EXIT_PASS
    report = json.loads((out / "report.json").read_text())
    assert report["result"]["derivative_oracle"]["worst_error"] <= 3e-4


def test_tails_experiment(tmp_path):
    config = {"kernel": {"family": "fbm", "H": 0.5, "T": 1.0, "rho": 1.0},
              "grid": {"n_steps": 64},
              "vf": {"name": "identity", "params": {"n": 1}},
              "experiment": "tails", "seed": 11, "n_paths": 20000}
    assert run(config, str(tmp_path / "out")) == EXIT_PASS


def test_varadhan_experiment(tmp_path):
    config = {
        "kernel": {"family": "fbm", "H": 0.5, "T": 1.0, "rho": 1.0},
        "grid": {"n_steps": 64},
        "vf": {"name": "identity", "params": {"n": 1}},
        "experiment": "varadhan", "seed": 13, "n_paths": 30000,
        "y_targets": [0.5], "eps_list": [0.5, 0.4, 0.3],
        "m_nodes": 8, "n_starts": 2,
        "thresholds": {"varadhan_gap": 0.1},
    }
    out = tmp_path / "out"
    assert run(config, str(out)) == EXIT_PASS
    table = (out / "varadhan.csv").read_text().splitlines()
    assert table[0] == "y,eps,eps2_log_p,trusted"
    assert len(table) == 4
    report = json.loads((out / "report.json").read_text())
    target = report["result"]["targets"][0]
    assert abs(target["rate_function"]["d2"] - 0.125) < 1e-3
