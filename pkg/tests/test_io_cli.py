import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pushident import cli
from pushident import io as pio
from pushident.dynamics import WorldConfig, world_rollout
from pushident.geometry import BodyState, ParamMap, PushAction
from pushident.identification import IdentConfig, infer_models

from conftest import graded_params

SCENE_DIR = Path(__file__).resolve().parents[1] / "scenes"
SCENES = sorted(p for p in SCENE_DIR.glob("*.json") if p.stem != "experiment")


@pytest.mark.parametrize("path", SCENES, ids=lambda p: p.stem)
def test_scene_files_round_trip(path, tmp_path):
    scene = pio.load_scene(path)
    out = tmp_path / "again.json"
    pio.save_scene(scene, out)
    assert out.read_bytes() == path.read_bytes()


def test_fine_pixel_scene_round_trip(tmp_path):
    d = {"cell_width": 0.02, "pixel_size": 0.01, "footprint": ["####", "####"],
         "hidden": {"mass": [0.01, 0.02], "friction": [0.3, 0.5]}}
    scene = pio.scene_from_dict(d)
    assert scene.obj.n == 2
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    pio.save_scene(scene, first)
    pio.save_scene(pio.load_scene(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_ensemble_and_trajectory_round_trip(bar, tmp_path):
    hidden = graded_params(bar)
    traj = world_rollout(bar, BodyState(np.zeros(2)),
                         [PushAction(1, [0.0, 0.3]), PushAction(4, [0.25, 0.05])], hidden,
                         WorldConfig(force_noise_sigma=0.05), rng_seed=3)
    ens = infer_models(bar, traj, IdentConfig(K=4, epochs=5))
    a, b = tmp_path / "e1.json", tmp_path / "e2.json"
    pio.save_ensemble(ens, a)
    back = pio.load_ensemble(a)
    pio.save_ensemble(back, b)
    assert a.read_bytes() == b.read_bytes()
    assert np.array_equal(back.masses, ens.masses)
    assert np.array_equal(back.probabilities, ens.probabilities)

    text = pio.dumps(pio.trajectory_to_dict(traj))
    again = pio.trajectory_from_dict(json.loads(text), bar)
    assert pio.dumps(pio.trajectory_to_dict(again)) == text
    assert np.array_equal(again.cells, traj.cells)


def test_syntax_errors_report_line(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "cell_width": 0.02,\n  "footprint": [\n}\n')
    with pytest.raises(pio.FormatError, match=r"bad.json:4:"):
        pio.load_scene(bad)


def test_missing_field_named(tmp_path):
    f = tmp_path / "s.json"
    f.write_text(json.dumps({"cell_width": 0.02, "footprint": ["##"]}))
    with pytest.raises(pio.FormatError, match="hidden"):
        pio.load_scene(f)


def test_hidden_grid_must_cover_footprint():
    d = {"cell_width": 0.02, "footprint": ["##"],
         "hidden": {"mass": [[0.01, None]], "friction": [[0.4, 0.4]]}}
    with pytest.raises(pio.FormatError, match="mass"):
        pio.scene_from_dict(d)


def test_csv_formatting():
    text = pio.csv_text([{"a": True, "b": 0.1, "c": None, "d": "x"}], ["a", "b", "c", "d"])
    assert text == "a,b,c,d\n1,0.1,,x\n"


# --- command line ------------------------------------------------------------

def run(argv):
    return cli.main([str(a) for a in argv])


def test_identify_writes_normalized_ensemble(tmp_path, capsys):
    out = tmp_path / "ens.json"
    assert run(["identify", "--scene", "rect", "--pushes", 5, "--K", 20, "--out", out]) == 0
    ens = pio.load_ensemble(out)
    assert ens.K == 20
    assert abs(ens.probabilities.sum() - 1) < 1e-9
    assert len(capsys.readouterr().out.strip().splitlines()) == 21


def test_zero_pushes_is_a_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run(["identify", "--scene", "rect", "--pushes", 0, "--out", tmp_path / "x.json"])
    assert exc.value.code == 2
    assert "--pushes" in capsys.readouterr().err


def test_identify_is_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert run(["identify", "--scene", SCENE_DIR / "hammer.json", "--seed", 7, "--K", 6,
                    "--out", out]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_plan_oracle_succeeds_and_counts_actions(tmp_path):
    ens = tmp_path / "ens.json"
    run(["identify", "--scene", "rect", "--seed", 3, "--K", 6, "--out", ens])
    report = tmp_path / "report.json"
    code = run(["plan", "--scene", "rect", "--ensemble", ens, "--mode", "oracle", "--seed", 3,
                "--out", report])
    rep = json.loads(report.read_text())
    assert code == 0 and rep["success"]
    assert rep["n_actions"] == len(rep["actions"])
    assert set(rep) >= {"mode", "seed", "success", "n_actions", "goal_pose", "fell"}


def test_plan_without_stable_goal_exit_code(tmp_path):
    scene = tmp_path / "stub.json"
    scene.write_text(json.dumps({"cell_width": 0.03, "footprint": ["###"],
                                 "hidden": {"mass": [[0.01, 0.01, 0.01]],
                                            "friction": [[0.4, 0.4, 0.4]]}}))
    code = run(["plan", "--scene", scene, "--mode", "oracle", "--eps", 0, "--pushes", 1,
                "--K", 2, "--out", tmp_path / "r.json"])
    assert code == cli.EXIT_NO_GOAL
    assert json.loads((tmp_path / "r.json").read_text())["error"] == "NoStableGoal"


def test_bad_scene_is_reported(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{\n oops\n}")
    assert run(["simulate", "--scene", bad, "--out", tmp_path / "t.json"]) == 2
    assert "bad.json:2:" in capsys.readouterr().err
    assert run(["simulate", "--scene", "nonexistent", "--out", tmp_path / "t.json"]) == 2


def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert run(["simulate", "--scene", "pan", "--seed", 4, "--pushes", 3, "--out", out]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(json.loads(a.read_text())["records"]) == 4


def test_experiment_rows_and_determinism(tmp_path):
    outs = [tmp_path / "o1", tmp_path / "o2"]
    for out in outs:
        assert run(["experiment", "--scene", "rect", "--trials", 2, "--kinds", "planning",
                    "balance", "--out", out]) == 0
    for name in ("trials.csv", "summary.csv", "balance.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    rows = (outs[0] / "trials.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 2 * 4
    assert rows[0].split(",") == cli.TRIAL_COLUMNS


def test_experiment_config_file(tmp_path):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"scenes": ["tee"], "modes": ["oracle"], "trials": 1,
                                "kinds": ["planning"], "noise": {"force_sigma": 0.0}}))
    assert run(["experiment", "--config", conf, "--out", tmp_path / "o"]) == 0
    conf.write_text(json.dumps({"scenes": ["tee"], "colour": "red"}))
    assert run(["experiment", "--config", conf, "--out", tmp_path / "o"]) == 2


def test_console_entry_point_and_log_level(tmp_path):
    env = dict(os.environ, PUSHIDENT_LOG="DEBUG")
    proc = subprocess.run([sys.executable, "-m", "pushident.cli", "identify", "--scene", "rect",
                           "--pushes", "1", "--K", "2", "--out", str(tmp_path / "e.json")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert "DEBUG" in proc.stderr
