import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from basslab.cli import cli_main
from basslab.io import read_columns_csv


def run(argv, capsys):
    code = cli_main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_converge_complete(tmp_path, capsys):
    code, out, _ = run(["converge", "--family", "complete", "--p", "0.02", "--q", "0.1",
                        "--Ms", "8,16,32,64,128,256", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert out.count("\n") == 1 and "slope" in out
    doc = json.loads((tmp_path / "complete_summary.json").read_text())
    assert -1.1 <= doc["fit"]["slope"] <= -0.9
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "converge"
    assert manifest["version"] == "0.1.0"
    assert manifest["config"]["Ms"] == [8, 16, 32, 64, 128, 256]
    assert "complete_summary.json" in manifest["outputs"]


def test_converge_circle_and_trajectories(tmp_path, capsys):
    code, _, _ = run(["converge", "--family", "circle", "--p", "0.02", "--q", "0.11",
                      "--Ms", "3,4,5", "--trajectories", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert (tmp_path / "circle_M4.csv").exists()
    assert "bound" in read_columns_csv(tmp_path / "circle_convergence.csv")


def test_converge_kgroup_with_spec_file(tmp_path, capsys):
    spec = {"K": 2, "a": [0.5, 0.5], "p": [0.02, 0.04], "Q": [[0.1, 0.2], [0.05, 0.1]]}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    code, out, _ = run(["converge", "--family", "kgroup", "--spec", str(tmp_path / "spec.json"),
                        "--Ms", "4,8,16", "--out", str(tmp_path / "o")], capsys)
    assert code == 0, out
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["spec"] == spec


def test_toy_geometric_column(tmp_path, capsys):
    code, _, _ = run(["toy", "--rule", "geometric", "--M", "6", "--out", str(tmp_path)], capsys)
    assert code == 0
    cols = read_columns_csv(tmp_path / "toy.csv")
    assert np.allclose(cols["u_6_exact"], np.exp(-729 * cols["t"]))
    assert np.max(np.abs(cols["u_6"] - cols["u_6_exact"])) < 1e-9


def test_simulate_twice_is_byte_identical(tmp_path, capsys):
    net = {"kind": "complete", "M": 6, "p": 0.05, "q": 0.3, "T": 30, "points": 31}
    cfg = tmp_path / "net.json"
    cfg.write_text(json.dumps(net))
    out = tmp_path / "run"
    argv = ["simulate", "--config", str(cfg), "--R", "1000", "--seed", "42", "--out", str(out)]
    assert run(argv, capsys)[0] == 0
    shutil.copytree(out, tmp_path / "first")
    assert run(argv + ["--workers", "3"], capsys)[0] == 0
    for name in ("simulate.csv", "simulate.meta.json"):
        assert (out / name).read_bytes() == (tmp_path / "first" / name).read_bytes()
    meta = json.loads((out / "simulate.meta.json").read_text())
    assert meta["master_seed"] == 42


def test_rerun_every_subcommand_identical(tmp_path, capsys):
    commands = [
        ["compartmental", "--model", "circle", "--p", "0.02", "--q", "0.11"],
        ["master", "--system", "complete", "--M", "5", "--p", "0.02", "--q", "0.1"],
        ["hetero", "--p", "0.01,0.1", "--q", "0.1,0.5", "--a", "0.3,0.7"],
        ["bound", "--system", "complete", "--M", "8", "--p", "0.02", "--q", "0.1"],
        ["toy", "--M", "4"],
    ]
    for i, argv in enumerate(commands):
        out = tmp_path / str(i)
        assert run(argv + ["--out", str(out)], capsys)[0] == 0
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        assert "manifest.json" in first
        assert run(argv + ["--out", str(out)], capsys)[0] == 0
        assert {p.name: p.read_bytes() for p in out.iterdir()} == first


def test_flags_override_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"M": 3, "rule": "unit", "points": 11}))
    code, _, _ = run(["toy", "--config", str(cfg), "--M", "5", "--out", str(tmp_path / "o")], capsys)
    assert code == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["M"] == 5
    assert manifest["config"]["points"] == 11
    assert "u_5" in read_columns_csv(tmp_path / "o" / "toy.csv")


def test_master_full_from_network_file(tmp_path, capsys):
    net = {"kind": "edges", "M": 3, "p": [0.1, 0.2, 0.05], "edges": [[0, 1, 0.5], [1, 2, 0.3]]}
    (tmp_path / "n.json").write_text(json.dumps(net))
    code, out, _ = run(["master", "--system", "full", "--network", str(tmp_path / "n.json"),
                        "--T", "20", "--out", str(tmp_path / "o")], capsys)
    assert code == 0, out
    cols = read_columns_csv(tmp_path / "o" / "master.csv")
    assert "S_1_2_3" in cols


def test_hetero_counterexample(tmp_path, capsys):
    code, out, _ = run(["hetero", "--mode", "counterexample", "--p", "0.02", "--q", "0.1",
                        "--out", str(tmp_path)], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "hetero_summary.json").read_text())
    assert doc["d2_ratio"] == pytest.approx(2.0, rel=0.05)


def test_unknown_flag_exit_1(tmp_path, capsys):
    code, _, err = run(["converge", "--bogus", "1"], capsys)
    assert code == 1
    assert "usage" in err


def test_unknown_subcommand_exit_1(capsys):
    assert run(["plot"], capsys)[0] == 1


def test_validation_error_exit_1(tmp_path, capsys):
    code, _, err = run(["bound", "--system", "circle", "--M", "8", "--p", "0.02", "--q", "0.11",
                        "--eps", "5", "--out", str(tmp_path)], capsys)
    assert code == 1
    assert "eps" in err
    code, _, _ = run(["converge", "--family", "complete", "--p", "0.02", "--out", str(tmp_path)], capsys)
    assert code == 1
    code, _, _ = run(["simulate", "--config", str(tmp_path / "missing.json")], capsys)
    assert code == 1


def test_numerical_failure_exit_2(tmp_path, capsys):
    code, _, err = run(["toy", "--rule", "geometric", "--M", "10", "--max-steps", "50",
                        "--out", str(tmp_path)], capsys)
    assert code == 2
    assert "numerical failure" in err


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "basslab", "toy", "--M", "3", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert res.stdout.startswith("toy unit M=3")


def test_worker_env_var(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("BASSLAB_WORKERS", "2")
    code, _, _ = run(["simulate", "--kind", "circle", "--M", "5", "--p", "0.1", "--q", "0.3",
                      "--R", "200", "--out", str(tmp_path)], capsys)
    assert code == 0
