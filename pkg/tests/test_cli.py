from __future__ import annotations

import csv
import json
import subprocess
import sys
from pathlib import Path


from pidreach.cli import main

MODELS = Path(__file__).parent / "models"


def toy_file(tmp_path, init=5, **over):
    doc = {"name": "toy", "state": [{"name": "x", "init": init}], "params": [],
           "modes": [{"name": "m", "flow": {"x": "0"}}], "transitions": [],
           "goal": "false", "horizon": 3}
    doc.update(over)
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(doc))
    return str(path)


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = main([*argv, "--out-dir", str(out), "--workers", "1"])
    return code, out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_builtin_switch_times(tmp_path):
    code, out = run(tmp_path, "simulate", "--model", "hovorka3meal", "--preset", "C1",
                    "--param", "T1=300", "--param", "T2=300", "--param", "D_G1=40",
                    "--param", "D_G2=90", "--param", "D_G3=60")
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["switch_times"] == [300.0, 600.0]
    r = rows(out / "trajectory.csv")
    assert list(r[0])[:2] == ["t_glob", "mode"] and "G" in r[0] and "u_total" in r[0]
    first = {row["mode"]: float(row["t_glob"]) for row in reversed(r)}
    assert first == {"Meal1": 0.0, "Meal2": 300.0, "Meal3": 600.0}


def test_simulate_constant_toy(tmp_path):
    code, out = run(tmp_path, "simulate", "--model", toy_file(tmp_path))
    assert code == 0
    r = rows(out / "trajectory.csv")
    assert {row["x"] for row in r} == {"5.0"}
    assert float(r[-1]["t_glob"]) == 3.0


def test_malformed_model_file(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "name": "x",\n  "state": [,]\n}\n')
    code, out = run(tmp_path, "simulate", "--model", str(bad))
    assert code == 2
    err = capsys.readouterr().err
    assert "line 3" in err and "column 13" in err
    assert json.loads((out / "manifest.json").read_text())["exit_code"] == 2


def test_unknown_param_is_input_error(tmp_path):
    code, _ = run(tmp_path, "simulate", "--model", toy_file(tmp_path), "--param", "zz=1")
    assert code == 2


def test_numeric_failure_exit_code(tmp_path):
    path = toy_file(tmp_path, params=[{"name": "T1", "dist": "nondet", "lo": 0, "hi": 100}],
                    modes=[{"name": "a", "flow": {}}, {"name": "b", "flow": {}}],
                    transitions=[{"from": "a", "to": "b", "guard": "t >= T1"}])
    code, _ = run(tmp_path, "simulate", "--model", path, "--param", "T1=50", "--depth", "1")
    assert code == 3


def test_enclose_half_line(tmp_path):
    path = toy_file(tmp_path, params=[{"name": "p", "dist": "uniform", "lo": 0, "hi": 1}],
                    goal="p <= 0.3")
    code, out = run(tmp_path, "enclose", "--model", path, "--epsilon", "1e-3")
    assert code == 0
    doc = json.loads((out / "enclosure.json").read_text())
    assert doc["lo"] <= 0.3 <= doc["hi"] and doc["width"] <= 1e-3
    assert rows(out / "decomposition.csv")[0].keys() == {"p_lo", "p_hi", "verdict", "mass_lo", "mass_hi"}


def test_enclose_budget_exit_code(tmp_path):
    path = toy_file(tmp_path, params=[{"name": "p", "dist": "uniform", "lo": 0, "hi": 1},
                                      {"name": "q", "dist": "uniform", "lo": 0, "hi": 1}],
                    goal="p + q <= 1")
    code, out = run(tmp_path, "enclose", "--model", path, "--epsilon", "1e-6", "--budget", "20")
    assert code == 4
    doc = json.loads((out / "enclosure.json").read_text())
    assert doc["budget_exhausted"] and doc["lo"] <= 0.5 <= doc["hi"]


def test_enclose_nondet_override(tmp_path):
    path = toy_file(tmp_path, init="d", params=[{"name": "d", "dist": "nondet", "lo": 0, "hi": 10}],
                    goal="x > 4")
    code, out = run(tmp_path, "enclose", "--model", path, "--nondet", "d=5:6")
    assert code == 0
    doc = json.loads((out / "enclosure.json").read_text())
    assert doc["lo"] == doc["hi"] == 1.0


def test_synth_dist_toy(tmp_path):
    path = toy_file(tmp_path, init="d", params=[{"name": "d", "dist": "nondet", "lo": 0, "hi": 10}],
                    goal="x > 4")
    code, out = run(tmp_path, "synth-dist", "--model", path, "--eps-d", "0.5")
    assert code == 0
    doc = json.loads((out / "disturbance.json").read_text())
    assert 3.5 <= doc["d_star"] <= 4.0 and doc["name"] == "d"


def test_synth_dist_nothing_certified(tmp_path):
    path = toy_file(tmp_path, init="d", params=[{"name": "d", "dist": "nondet", "lo": 5, "hi": 10}],
                    goal="x > 4")
    code, out = run(tmp_path, "synth-dist", "--model", path)
    assert code == 4
    assert json.loads((out / "disturbance.json").read_text())["d_star"] is None


def test_synth_pid_formal_toy(tmp_path):
    path = toy_file(tmp_path, params=[{"name": "w", "dist": "uniform", "lo": 0, "hi": 1},
                                      {"name": "k", "dist": "nondet", "lo": 0, "hi": 1}],
                    goal="w <= k")
    code, out = run(tmp_path, "synth-pid", "--model", path, "--method", "formal", "--epsilon", "0.01")
    assert code == 0
    doc = json.loads((out / "synth.json").read_text())
    assert doc["k_star"]["k"] <= 0.01 and doc["epsilon_achieved"]


def test_synth_pid_statistical_toy(tmp_path):
    path = toy_file(tmp_path, params=[{"name": "w", "dist": "uniform", "lo": 0, "hi": 1},
                                      {"name": "k", "dist": "nondet", "lo": 0, "hi": 1}],
                    goal="w <= k")
    code, out = run(tmp_path, "synth-pid", "--model", path, "--runs", "500", "--seed", "4")
    assert code == 0
    doc = json.loads((out / "synth.json").read_text())
    assert doc["k_hat"]["k"] <= 0.05 and doc["n_samples"] == 500
    assert doc["ci"][0] <= doc["hits"] / 500 <= doc["ci"][1]


def test_evaluate_small(tmp_path):
    code, out = run(tmp_path, "evaluate", "--preset", "C1", "--runs", "20", "--seed", "1")
    assert code == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["n_runs"] == 20
    assert len(rows(out / "traces.csv")) == 20
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "evaluate" and man["seed"] == 1 and man["exit_code"] == 0
    assert set(man["outputs"]) == {"traces.csv", "stats.json"}


def test_rerun_is_byte_identical(tmp_path):
    argv = ("evaluate", "--preset", "C2", "--runs", "15", "--seed", "7")
    _, a = run(tmp_path, *argv, name="a")
    _, b = run(tmp_path, *argv, name="b")
    for f in ("traces.csv", "stats.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    path = toy_file(tmp_path, params=[{"name": "p", "dist": "uniform", "lo": 0, "hi": 1}],
                    goal="p <= 0.3")
    _, a = run(tmp_path, "enclose", "--model", path, name="c")
    _, b = run(tmp_path, "enclose", "--model", path, name="d")
    for f in ("decomposition.csv", "enclosure.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_workers_do_not_change_outputs(tmp_path):
    argv = ["evaluate", "--preset", "C1", "--runs", "12", "--seed", "2"]
    assert main([*argv, "--out-dir", str(tmp_path / "w1"), "--workers", "1"]) == 0
    assert main([*argv, "--out-dir", str(tmp_path / "w3"), "--workers", "3"]) == 0
    for f in ("traces.csv", "stats.json"):
        assert (tmp_path / "w1" / f).read_bytes() == (tmp_path / "w3" / f).read_bytes()


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "C1", "runs": 5, "seed": 3}))
    code, out = run(tmp_path, "evaluate", "--config", str(cfg), "--runs", "4")
    assert code == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["runs"] == 4 and man["config"]["preset"] == "C1" and man["seed"] == 3


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["evaluate", "--config", str(cfg)]) == 2


def test_bad_gain_string(tmp_path):
    code, _ = run(tmp_path, "evaluate", "--gains", "1,2", "--runs", "2")
    assert code == 2


def test_console_entry_point(tmp_path):
    path = toy_file(tmp_path)
    proc = subprocess.run([sys.executable, "-m", "pidreach.cli", "simulate", "--model", path,
                           "--out-dir", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0
    assert (tmp_path / "o" / "manifest.json").exists()
    proc = subprocess.run([sys.executable, "-m", "pidreach.cli", "simulate", "--model",
                           str(tmp_path / "missing.json")], capture_output=True, text=True,
                          cwd=tmp_path)
    assert proc.returncode == 2 and "error" in proc.stderr
