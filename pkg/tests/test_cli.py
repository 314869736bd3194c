import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from robustkb.cli import emit_report, run

SMALL = {"n": 1, "m": 1, "B": 0, "H": 1, "b": 0, "h": 0, "Q": 1, "R": 1, "x0": 0,
         "T": 1, "N": 50, "mu": 0.3, "epsilon": 0.5,
         "run": {"seed": 7, "n_paths": 400, "generator": "hyperbolic:1", "t_star": 1.0}}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_simulate_writes_paths(tmp_path, small_config):
    assert run(["simulate", "--config", small_config, "--paths", "3", "--theta", "const:0.1,0.2",
                "--out-dir", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "paths.csv")
    assert len(rows) == 3 * 51
    assert set(rows[0]) == {"path_id", "t", "x", "m", "f_theta"}


def test_filter_from_observation_file(tmp_path, small_config):
    run(["simulate", "--config", small_config, "--paths", "2", "--out-dir", str(tmp_path)])
    assert run(["filter", "--config", small_config, "--obs", str(tmp_path / "paths.csv"),
                "--path-id", "1", "--out-dir", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "filter.csv")
    assert len(rows) == 51 and float(rows[0]["x_hat"]) == 0.0
    assert float(rows[-1]["P"]) == pytest.approx(np.tanh(1.0), abs=1e-6)


def test_robust_filter_zero_mu_reduces(tmp_path, small_config, capsys):
    assert run(["robust-filter", "--config", small_config, "--mu", "0",
                "--out-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "robust_report.json").read_text())
    assert report["gap"] == 0
    assert report["identical_to_classical"] is True
    assert report["max_abs_diff_classical"] == 0
    assert report["lower_value"] == report["upper_value"]


def test_robust_filter_report_is_byte_identical(tmp_path, small_config):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert run(["robust-filter", "--config", small_config, "--out-dir", str(d)]) == 0
        outs.append((d / "robust_report.json").read_bytes() + (d / "robust_filter.csv").read_bytes())
    assert outs[0] == outs[1]
    report = json.loads((tmp_path / "a" / "robust_report.json").read_text())
    assert report["gap"] >= -1e-8 and report["seed"] == 7


def test_out_dir_from_environment(tmp_path, small_config, monkeypatch):
    monkeypatch.setenv("ROBUSTKB_OUT_DIR", str(tmp_path / "env"))
    assert run(["filter", "--config", small_config]) == 0
    assert (tmp_path / "env" / "filter.csv").exists()


def test_dual_check_row(tmp_path, small_config, capsys):
    assert run(["dual-check", "--config", small_config, "--paths", "2000", "--family-size", "5",
                "--out-dir", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    head, row = lines[-2].split(","), [float(v) for v in lines[-1].split(",")]
    rec = dict(zip(head, row))
    assert rec["dual_value"] <= rec["bsde_value"] + 4 * rec["combined_se"]


def test_mmse_finite(tmp_path):
    space = {"prob": [0.25] * 4, "densities": [[1, 1, 1, 1], [1.6, 0.8, 1.0, 0.6]],
             "penalties": [0, 0.1], "partition": [[0, 1], [2, 3]]}
    (tmp_path / "space.json").write_text(json.dumps(space))
    (tmp_path / "xi.csv").write_text("1.0,0.0,2.0,-1.0\n")
    out = tmp_path / "mmse.json"
    assert run(["mmse-finite", "--space", str(tmp_path / "space.json"), "--xi",
                str(tmp_path / "xi.csv"), "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["gap"] >= -1e-10 and rep["saddle_violation"] <= 1e-8
    assert rep["stable"] is False and rep["stability_witnesses"][0][0] == 1
    assert rep["value"] == pytest.approx(rep["rho_of_squared_error"], abs=1e-8)


def test_selfcheck_bundled_config(tmp_path, capsys):
    assert run(["selfcheck", "--out-dir", str(tmp_path)]) == 0
    assert "5/5" in capsys.readouterr().out


@pytest.mark.parametrize("change,needle", [
    ({"R": 0}, "R"),
    ({"Q": -0.1}, "Q"),
    ({"N": 1}, "N"),
])
def test_malformed_config_exits_one(tmp_path, capsys, change, needle):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(dict(SMALL, **change)))
    assert run(["filter", "--config", str(path), "--out-dir", str(tmp_path)]) == 1
    assert needle in capsys.readouterr().err


def test_missing_key_and_unknown_command(tmp_path, capsys):
    doc = dict(SMALL)
    del doc["H"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert run(["filter", "--config", str(path)]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["robust-filter", "--config", str(path), "--generator", "huber:1"]) == 1


def test_emit_report_formatting():
    text = emit_report({"b": np.float64(1 / 3), "a": [np.inf, 1.0], "c": np.array([2.0])})
    assert list(json.loads(text)) == ["a", "b", "c"]
    assert json.loads(text)["a"][0] is None
    assert "0.333333333333," in text and "0.3333333333333" not in text


def test_module_entry_point(tmp_path, small_config):
    proc = subprocess.run([sys.executable, "-m", "robustkb", "filter", "--config", small_config,
                           "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
