"""Batch experiments: planning success per mode, balance prediction, learning curves.

Everything here is pure given seeds; files are written by the CLI only.
Trials are keyed by (scene, trial) and every mode of a trial shares one
identification session, so mode comparisons are paired.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .dynamics import (WorldConfig, balance_check, breakaway_force, center_of_mass,
                       integrate_pose, solve_twist, step)
from .exploration import MODES as EXPLORE_MODES
from .geometry import BodyState, GridObject, PushAction, add_distance, rotation
from .io import Scene, scene_from_dict
from .pipeline import (PLAN_MODES, PipelineConfig, derive_seed, identify_trial,
                       planning_model, pregrasp_pipeline)
from .planning import failure_probability

TRIAL_COLUMNS = ["scene", "trial", "mode", "seed", "success", "n_actions", "reached", "fell",
                 "error", "exploration_pushes", "goal_x", "goal_y", "goal_theta"]
SUMMARY_COLUMNS = ["scene", "mode", "trials", "success_rate", "mean_actions", "std_actions"]
CURVE_COLUMNS = ["scene", "explore_mode", "seed", "pushes", "error"]
BALANCE_COLUMNS = ["scene", "trial", "mode", "picked", "stable"]

CONTROL_NOISE = {"force_sigma": 0.05, "angle_sigma": 0.03}


# --- synthetic scenes -----------------------------------------------------------

def _grid(rows, value_of):
    """Per-pixel values for a footprint; ``value_of(col, row_from_top)`` for filled pixels."""
    return [[value_of(c, r) if ch == "#" else None for c, ch in enumerate(line)]
            for r, line in enumerate(rows)]


def _scene_dict(name, rows, mass_of, fric_of, cell_width=0.03):
    return {"name": name, "cell_width": cell_width, "footprint": rows,
            "table": {"shape": "disc", "radius": 0.5, "center": [0.0, 0.0]},
            "hidden": {"mass": _grid(rows, mass_of), "friction": _grid(rows, fric_of)},
            "noise": dict(CONTROL_NOISE), "start": [0.0, 0.0, 0.0]}


def synthetic_scene_dicts() -> dict:
    """Six objects; all but ``rect`` and ``tee`` carry a skewed hidden mass."""
    hammer = ["......##", "########", "......##"]
    rect = ["######", "######"]
    ell = ["##....", "##....", "######"]
    tee = ["#####", "..#..", "..#..", "..#..", "..#.."]
    pan = ["###.....", "########", "###....."]
    scenes = [
        _scene_dict("hammer", hammer, lambda c, r: 0.03 if c >= 6 else 0.006,
                    lambda c, r: 0.4),
        _scene_dict("rect", rect, lambda c, r: 0.01, lambda c, r: 0.4),
        _scene_dict("wedge", rect, lambda c, r: 0.004 + 0.0052 * c,
                    lambda c, r: 0.3 + 0.04 * c),
        _scene_dict("ell", ell, lambda c, r: 0.025 if c < 2 else 0.006,
                    lambda c, r: 0.4),
        _scene_dict("tee", tee, lambda c, r: 0.01, lambda c, r: 0.4),
        _scene_dict("pan", pan, lambda c, r: 0.025 if c < 3 else 0.004,
                    lambda c, r: 0.5 if c < 3 else 0.35),
    ]
    return {d["name"]: d for d in scenes}


SKEWED = ("hammer", "wedge", "ell", "pan")


def synthetic_scene(name: str) -> Scene:
    try:
        return scene_from_dict(synthetic_scene_dicts()[name], name)
    except KeyError:
        raise KeyError(f"unknown built-in scene {name!r}") from None


# --- parallel map with deterministic order ---------------------------------------

def _pmap(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


# --- planning success per mode ------------------------------------------------------

def trial_seed(base_seed: int, scene_name: str, trial: int) -> int:
    return derive_seed(base_seed, scene_name, trial)


def _planning_task(task):
    scene, modes, trial, base_seed, cfg = task
    seed = trial_seed(base_seed, scene.name, trial)
    prepared = identify_trial(scene, seed, cfg)
    rows = []
    for mode in modes:
        rep = pregrasp_pipeline(scene, mode, seed, cfg, prepared=prepared)
        goal = rep["goal_pose"] or [None] * 3
        rows.append({"scene": scene.name, "trial": trial, "mode": mode, "seed": seed,
                     "success": rep["success"], "n_actions": rep["n_actions"],
                     "reached": rep["reached"], "fell": rep["fell"], "error": rep["error"] or "",
                     "exploration_pushes": rep["exploration_pushes"],
                     "goal_x": goal[0], "goal_y": goal[1], "goal_theta": goal[2]})
    return rows


def run_planning_batch(scenes, modes=PLAN_MODES, trials: int = 100, base_seed: int = 0,
                       cfg: PipelineConfig = None, jobs: int = 1) -> list:
    """One row per (scene, trial, mode), ordered by scene, trial, then mode order."""
    cfg = cfg or PipelineConfig()
    if trials < 1:
        raise ValueError("trials must be >= 1")
    for m in modes:
        if m not in PLAN_MODES:
            raise ValueError(f"unknown planning mode {m!r}")
    tasks = [(sc, tuple(modes), t, base_seed, cfg) for sc in scenes for t in range(trials)]
    return [row for rows in _pmap(_planning_task, tasks, jobs) for row in rows]


def summarize(rows) -> list:
    """Success rate and action count (mean, std over successful trials) per scene and mode."""
    out = []
    keys = []
    for r in rows:
        k = (r["scene"], r["mode"])
        if k not in keys:
            keys.append(k)
    for scene, mode in keys:
        sel = [r for r in rows if r["scene"] == scene and r["mode"] == mode]
        acts = np.array([r["n_actions"] for r in sel if r["success"]], dtype=float)
        out.append({"scene": scene, "mode": mode, "trials": len(sel),
                    "success_rate": float(np.mean([r["success"] for r in sel])),
                    "mean_actions": float(acts.mean()) if acts.size else float("nan"),
                    "std_actions": float(acts.std()) if acts.size else float("nan")})
    return out


# --- balance prediction -----------------------------------------------------------------

def principal_axis(obj: GridObject) -> float:
    """Angle (body frame) of the footprint's long axis."""
    pts = obj.offsets
    _, v = np.linalg.eigh(pts.T @ pts)
    return float(math.atan2(v[1, -1], v[0, -1]))


def balance_poses(scene: Scene, rng: np.random.Generator, count: int = 10,
                  spread: float = None, axis_jitter: float = math.radians(20)) -> np.ndarray:
    """Edge poses near tipping, placed with knowledge of the hidden COM.

    Each pose sticks the object's long axis out over the edge (either end
    first) and puts the true COM a uniform ``[-spread, spread]`` inside
    the edge; ``spread`` defaults to two thirds of a cell width.
    """
    obj, table = scene.obj, scene.table
    spread = 2 * obj.cell_width / 3 if spread is None else spread
    com0 = center_of_mass(obj, np.zeros(3), scene.hidden.mass)
    axis = principal_axis(obj)
    out = []
    for _ in range(count):
        phi = rng.uniform(-math.pi, math.pi)
        theta = phi - axis + rng.uniform(-axis_jitter, axis_jitter) + math.pi * rng.integers(2)
        depth = rng.uniform(-spread, spread)
        com_world = (table.radius - depth) * np.array([math.cos(phi), math.sin(phi)])
        pos = np.asarray(table.center) + com_world - rotation(theta) @ com0
        out.append([pos[0], pos[1], math.atan2(math.sin(theta), math.cos(theta))])
    return np.array(out)


def _balance_task(task):
    scene, poses, truth, trial, base_seed, epsilon, cfg = task
    seed = trial_seed(base_seed, scene.name, trial)
    prepared = identify_trial(scene, seed, cfg)
    rows = []
    pick_rng = np.random.default_rng(derive_seed(seed, "pick"))
    for mode in PLAN_MODES:
        if prepared.error is not None:
            rows.append({"scene": scene.name, "trial": trial, "mode": mode, "picked": -1,
                         "stable": False})
            continue
        model = planning_model(mode, prepared.session.ensemble, scene.hidden,
                               np.random.default_rng(derive_seed(seed, "draw")))
        fail = failure_probability(scene.obj, poses, model, scene.table)
        ok = np.nonzero(fail <= epsilon + 1e-12)[0]
        picked = int(pick_rng.choice(ok)) if ok.size else -1
        rows.append({"scene": scene.name, "trial": trial, "mode": mode, "picked": picked,
                     "stable": bool(picked >= 0 and truth[picked])})
    return rows


def run_balance_experiment(scenes, trials: int = 100, base_seed: int = 0, n_poses: int = 10,
                           epsilon: float = 0.1, cfg: PipelineConfig = None, jobs: int = 1):
    """Pick a predicted-stable edge pose per method and check it against the hidden model.

    Returns (rows, poses per scene, true stability per scene). A trial in
    which a method finds no qualifying pose counts as a failure.
    """
    cfg = cfg or PipelineConfig()
    poses, truth, tasks = {}, {}, []
    for sc in scenes:
        p = balance_poses(sc, np.random.default_rng(derive_seed(base_seed, sc.name, "poses")),
                          n_poses)
        poses[sc.name] = p
        truth[sc.name] = np.array([balance_check(sc.obj, BodyState.from_pose(x), sc.hidden,
                                                 sc.table) for x in p])
        tasks += [(sc, p, truth[sc.name], t, base_seed, epsilon, cfg) for t in range(trials)]
    rows = [r for rs in _pmap(_balance_task, tasks, jobs) for r in rs]
    return rows, poses, truth


def balance_rates(rows, scenes=None) -> dict:
    """mode -> fraction of trials whose pick was truly stable (optionally restricted to scenes)."""
    out = {}
    for mode in PLAN_MODES:
        sel = [r["stable"] for r in rows if r["mode"] == mode
               and (scenes is None or r["scene"] in scenes)]
        if sel:
            out[mode] = float(np.mean(sel))
    return out


# --- learning curves -------------------------------------------------------------------

def heldout_set(scene: Scene, rng: np.random.Generator, count: int = 30):
    """(start pose, push, true next pose) triples with noise-free ground-truth outcomes."""
    obj, hidden = scene.obj, scene.hidden
    brk = float(breakaway_force(hidden.products))
    noiseless = WorldConfig()
    out = []
    for _ in range(count):
        body = BodyState(rng.uniform(-0.1, 0.1, 2), rng.uniform(-math.pi, math.pi))
        cell, normal = obj.contour[int(rng.integers(len(obj.contour)))]
        d = rotation(body.rotation) @ rotation(rng.uniform(-0.26, 0.26)) @ (-np.asarray(normal, float))
        act = PushAction(cell, brk * rng.uniform(0.2, 1.0) * d)
        out.append((body, act, step(obj, body, act, hidden, noiseless).pose))
    return out


def prediction_error(obj: GridObject, ensemble, heldout, friction=None) -> float:
    """Mean over held-out pushes of the probability-weighted per-cell position error."""
    friction = friction or WorldConfig().friction
    errs = []
    for body, act, truth in heldout:
        contact = obj.offsets[act.contact_cell]
        fb = rotation(body.rotation).T @ act.force
        tw = solve_twist(obj, contact, fb, ensemble.products, friction)
        pred = integrate_pose(body.pose, tw, act.duration)
        errs.append(float(ensemble.probabilities @ add_distance(obj, pred, truth)))
    return float(np.mean(errs))


def _curve_task(task):
    scene, explore_mode, s, base_seed, heldout, cfg = task
    seed = derive_seed(base_seed, scene.name, "curve", s)
    prepared = identify_trial(scene, seed, replace(cfg, explore_mode=explore_mode))
    if prepared.error is not None:
        return [{"scene": scene.name, "explore_mode": explore_mode, "seed": s, "pushes": k + 1,
                 "error": float("nan")} for k in range(cfg.ident.nb_actions)]
    return [{"scene": scene.name, "explore_mode": explore_mode, "seed": s, "pushes": k + 1,
             "error": prediction_error(scene.obj, ens, heldout)}
            for k, ens in enumerate(prepared.session.history)]


def run_learning_curve(scene: Scene, explore_modes=EXPLORE_MODES, seeds: int = 20,
                       base_seed: int = 0, n_heldout: int = 30, cfg: PipelineConfig = None,
                       jobs: int = 1) -> list:
    """Held-out one-step error after each exploration push, per mode and seed."""
    cfg = cfg or PipelineConfig()
    heldout = heldout_set(scene, np.random.default_rng(derive_seed(base_seed, scene.name, "heldout")),
                          n_heldout)
    tasks = [(scene, m, s, base_seed, heldout, cfg) for m in explore_modes for s in range(seeds)]
    return [r for rs in _pmap(_curve_task, tasks, jobs) for r in rs]


def mean_curve(rows, explore_mode: str) -> np.ndarray:
    sel = [r for r in rows if r["explore_mode"] == explore_mode]
    pushes = sorted({r["pushes"] for r in sel})
    return np.array([np.nanmean([r["error"] for r in sel if r["pushes"] == k]) for k in pushes])
