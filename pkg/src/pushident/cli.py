"""Command-line entry point: ``pushident {identify,plan,simulate,experiment}``.

Exit codes: 0 success, 1 plan finished without success, 2 usage or input
error, 3 no stable goal pose, 4 object pushed off the table during
identification. Set ``PUSHIDENT_LOG`` (e.g. ``DEBUG``) for log output on
stderr.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as pio
from .dynamics import World
from .errors import WorkspaceExceeded
from .experiment import (BALANCE_COLUMNS, CURVE_COLUMNS, SUMMARY_COLUMNS, TRIAL_COLUMNS,
                         balance_rates, mean_curve, run_balance_experiment, run_learning_curve,
                         run_planning_batch, summarize, synthetic_scene, synthetic_scene_dicts)
from .exploration import MODES as EXPLORE_MODES
from .exploration import ExploreConfig, sample_candidates
from .geometry import Trajectory
from .identification import IdentConfig, run_identification_session
from .pipeline import (PLAN_MODES, PipelineConfig, derive_seed, plan_from_ensemble,
                       pregrasp_pipeline)

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_NO_GOAL, EXIT_WORKSPACE = 0, 1, 2, 3, 4
KINDS = ("planning", "balance", "curve")

log = logging.getLogger("pushident")


class UsageError(Exception):
    pass


def resolve_scene(ref: str):
    """A scene file path, or the name of a built-in synthetic scene."""
    path = Path(ref)
    if path.exists():
        return pio.load_scene(path)
    if ref in synthetic_scene_dicts():
        return synthetic_scene(ref)
    raise UsageError(f"scene {ref!r} is neither a file nor a built-in scene "
                     f"({', '.join(synthetic_scene_dicts())})")


def _positive(name):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1 (got {v})")
        return v
    return parse


def _pipeline_config(args) -> PipelineConfig:
    ident = IdentConfig(K=args.K, nb_actions=args.pushes)
    kw = {"ident": ident, "explore_mode": args.explore}
    if getattr(args, "eps", None) is not None:
        kw["epsilon"] = args.eps
    return PipelineConfig(**kw)


# --- subcommands ----------------------------------------------------------------

def cmd_identify(args) -> int:
    scene = resolve_scene(args.scene)
    cfg = _pipeline_config(args)
    world = World(scene.obj, scene.hidden, scene.noise, seed=derive_seed(args.seed, "world"),
                  table=scene.table)
    status = EXIT_OK
    try:
        session = run_identification_session(
            scene.obj, world, cfg.ident, args.explore, start=scene.start_body,
            rng=np.random.default_rng(derive_seed(args.seed, "explore")), explore_cfg=cfg.explore)
    except WorkspaceExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        session, status = exc.result, EXIT_WORKSPACE
        if session is None or session.ensemble is None:
            return status
    ens = session.ensemble
    print(f"{'k':>3} {'loss':>12} {'probability':>12}")
    for k, (loss, p) in enumerate(zip(ens.losses, ens.probabilities)):
        print(f"{k:>3} {loss:12.6g} {p:12.6f}")
    pio.save_ensemble(ens, args.out)
    if args.trajectory:
        pio.write_text(args.trajectory, pio.dumps(pio.trajectory_to_dict(session.trajectory)))
    return status


def cmd_plan(args) -> int:
    scene = resolve_scene(args.scene)
    cfg = _pipeline_config(args)
    if args.ensemble:
        ens = pio.load_ensemble(args.ensemble)
        report = plan_from_ensemble(scene, ens, args.mode, args.seed, cfg)
    else:
        report = pregrasp_pipeline(scene, args.mode, args.seed, cfg)
    report["scene"] = scene.name
    pio.write_text(args.out, pio.dumps(report))
    print(f"{scene.name} {args.mode}: success={report['success']} actions={report['n_actions']}"
          + (f" error={report['error']}" if report["error"] else ""))
    if report["error"] == "NoStableGoal":
        return EXIT_NO_GOAL
    if report["error"] == "WorkspaceExceeded":
        return EXIT_WORKSPACE
    return EXIT_OK if report["success"] else EXIT_FAILED


def cmd_simulate(args) -> int:
    """Random exploration-style pushes executed in the ground-truth world."""
    scene = resolve_scene(args.scene)
    rng = np.random.default_rng(derive_seed(args.seed, "simulate"))
    world = World(scene.obj, scene.hidden, scene.noise, seed=derive_seed(args.seed, "world"),
                  table=scene.table)
    bodies, actions = [scene.start_body.at_rest()], []
    for _ in range(args.pushes):
        act = sample_candidates(scene.obj, bodies[-1], scene.hidden.products, rng,
                                ExploreConfig(n_candidates=1), scene.noise.dt,
                                gravity=scene.noise.friction.gravity)[0]
        actions.append(act)
        bodies.append(world.execute(bodies[-1], act).at_rest())
    traj = Trajectory.from_bodies(scene.obj, bodies, actions, scene.noise.dt)
    pio.write_text(args.out, pio.dumps(pio.trajectory_to_dict(traj)))
    final = traj.bodies[-1].pose
    print(f"{scene.name}: {len(actions)} pushes, final pose "
          f"({final[0]:.4f}, {final[1]:.4f}, {final[2]:.4f})")
    return EXIT_OK


def _experiment_settings(args) -> dict:
    conf = pio.read_json(args.config) if args.config else {}
    unknown = set(conf) - {"scenes", "modes", "trials", "seed", "kinds", "noise", "jobs",
                           "curve_seeds", "explore_modes", "pushes", "K", "eps"}
    if unknown:
        raise UsageError(f"{args.config}: unknown keys {sorted(unknown)}")

    def pick(flag, key, default):
        v = getattr(args, flag)
        return v if v is not None else conf.get(key, default)

    s = {
        "scenes": pick("scene", "scenes", list(synthetic_scene_dicts())),
        "modes": pick("modes", "modes", list(PLAN_MODES)),
        "trials": pick("trials", "trials", 100),
        "seed": pick("seed", "seed", 0),
        "kinds": pick("kinds", "kinds", list(KINDS)),
        "jobs": pick("jobs", "jobs", 1),
        "curve_seeds": pick("curve_seeds", "curve_seeds", 20),
        "explore_modes": pick("explore_modes", "explore_modes", list(EXPLORE_MODES)),
        "pushes": pick("pushes", "pushes", 5),
        "K": pick("K", "K", 20),
        "eps": pick("eps", "eps", 0.1),
        "noise": conf.get("noise"),
    }
    if int(s["trials"]) < 1 or int(s["curve_seeds"]) < 1:
        raise UsageError("trials and curve_seeds must be >= 1")
    for m in s["modes"]:
        if m not in PLAN_MODES:
            raise UsageError(f"unknown mode {m!r}; choose from {', '.join(PLAN_MODES)}")
    for k in s["kinds"]:
        if k not in KINDS:
            raise UsageError(f"unknown experiment kind {k!r}; choose from {', '.join(KINDS)}")
    return s


def cmd_experiment(args) -> int:
    s = _experiment_settings(args)
    scenes = [resolve_scene(ref) for ref in s["scenes"]]
    if s["noise"] is not None:
        noise = s["noise"]
        scenes = [replace(sc, noise=replace(sc.noise,
                                            force_noise_sigma=float(noise.get("force_sigma", 0.0)),
                                            angle_noise_sigma=float(noise.get("angle_sigma", 0.0))))
                  for sc in scenes]
    cfg = PipelineConfig(ident=IdentConfig(K=int(s["K"]), nb_actions=int(s["pushes"])),
                         epsilon=float(s["eps"]))
    out = Path(args.out)
    jobs, seed, trials = int(s["jobs"]), int(s["seed"]), int(s["trials"])

    if "planning" in s["kinds"]:
        rows = run_planning_batch(scenes, s["modes"], trials, seed, cfg, jobs)
        pio.write_text(out / "trials.csv", pio.csv_text(rows, TRIAL_COLUMNS))
        summary = summarize(rows)
        pio.write_text(out / "summary.csv", pio.csv_text(summary, SUMMARY_COLUMNS))
        print(f"{'scene':<10} {'mode':<14} {'success':>8} {'actions':>15}")
        for r in summary:
            acts = ("-" if math.isnan(r["mean_actions"])
                    else f"{r['mean_actions']:.2f} +- {r['std_actions']:.2f}")
            print(f"{r['scene']:<10} {r['mode']:<14} {r['success_rate']:8.3f} {acts:>15}")
    if "balance" in s["kinds"]:
        rows, _, _ = run_balance_experiment(scenes, trials, seed, epsilon=cfg.epsilon, cfg=cfg,
                                            jobs=jobs)
        pio.write_text(out / "balance.csv", pio.csv_text(rows, BALANCE_COLUMNS))
        rates = balance_rates(rows)
        print("stable-selection rate: " + ", ".join(f"{m} {v:.3f}" for m, v in rates.items()))
    if "curve" in s["kinds"]:
        rows = []
        for sc in scenes:
            rows += run_learning_curve(sc, s["explore_modes"], int(s["curve_seeds"]), seed,
                                       cfg=cfg, jobs=jobs)
        pio.write_text(out / "curve.csv", pio.csv_text(rows, CURVE_COLUMNS))
        for m in s["explore_modes"]:
            print(f"held-out error ({m}): "
                  + " ".join(f"{v * 1000:.2f}" for v in mean_curve(rows, m)) + " mm")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pushident",
                                 description="Identify per-cell mass/friction by pushing, "
                                             "then push the object to a stable overhanging pose.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, pushes=True):
        p.add_argument("--scene", required=True, help="scene JSON file or built-in scene name")
        p.add_argument("--seed", type=int, default=0)
        if pushes:
            p.add_argument("--pushes", type=_positive("--pushes"), default=5,
                           help="exploration pushes (default 5)")

    p = sub.add_parser("identify", help="explore and write a model ensemble")
    common(p)
    p.add_argument("--K", type=_positive("--K"), default=20, help="ensemble size (even)")
    p.add_argument("--explore", choices=EXPLORE_MODES, default="random")
    p.add_argument("--out", required=True, help="ensemble JSON to write")
    p.add_argument("--trajectory", help="also write the exploration trajectory here")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("plan", help="pick a stable edge pose and push the object there")
    common(p)
    p.add_argument("--ensemble", help="ensemble JSON; identify from scratch if omitted")
    p.add_argument("--K", type=_positive("--K"), default=20)
    p.add_argument("--explore", choices=EXPLORE_MODES, default="random")
    p.add_argument("--mode", choices=PLAN_MODES, default="probabilistic")
    p.add_argument("--eps", type=float, default=0.1, help="failure probability threshold")
    p.add_argument("--out", required=True, help="report JSON to write")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="dump one ground-truth rollout of random pushes")
    common(p)
    p.add_argument("--out", required=True, help="trajectory JSON to write")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="batch runs writing CSV files")
    p.add_argument("--config", help="JSON with any of: scenes, modes, trials, seed, kinds, "
                                    "noise, jobs, curve_seeds, explore_modes, pushes, K, eps")
    p.add_argument("--scene", action="append", help="repeatable; default: all built-in scenes")
    p.add_argument("--modes", nargs="+", choices=PLAN_MODES)
    p.add_argument("--kinds", nargs="+", choices=KINDS)
    p.add_argument("--trials", type=_positive("--trials"))
    p.add_argument("--curve-seeds", dest="curve_seeds", type=_positive("--curve-seeds"))
    p.add_argument("--explore-modes", dest="explore_modes", nargs="+", choices=EXPLORE_MODES)
    p.add_argument("--pushes", type=_positive("--pushes"))
    p.add_argument("--K", type=_positive("--K"))
    p.add_argument("--eps", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=_positive("--jobs"))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("PUSHIDENT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, pio.FormatError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"pushident {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
