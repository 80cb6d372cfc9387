"""End-to-end pre-grasp sliding: identify, choose a stable edge pose, push there."""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import World, balance_check
from .errors import ExecutionDiverged, NoStableGoal, PlanningFailed, WorkspaceExceeded
from .exploration import ExploreConfig
from .geometry import ParamMap
from .identification import IdentConfig, ModelEnsemble, run_identification_session
from .planning import GoalQuery, PlanConfig, robust_plan, sample_stable_goal

log = logging.getLogger(__name__)

PLAN_MODES = ("uniform", "deterministic", "probabilistic", "oracle")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def uniform_model(ensemble: ModelEnsemble) -> ParamMap:
    """Spread the ensemble's expected total mass and total product evenly over the cells."""
    n = ensemble.models[0].n
    mass = float(ensemble.probabilities @ ensemble.masses.sum(1)) / n
    prod = float(ensemble.probabilities @ ensemble.products.sum(1)) / n
    return ParamMap.uniform(n, mass, prod / mass)


@dataclass(frozen=True)
class PipelineConfig:
    ident: IdentConfig = field(default_factory=IdentConfig)
    explore: ExploreConfig = field(default_factory=ExploreConfig)
    explore_mode: str = "random"
    plan: PlanConfig = field(default_factory=PlanConfig)
    epsilon: float = 0.1
    goal_samples: int = 200
    arc_half_width: float = math.radians(30)


def planning_model(mode: str, ensemble: ModelEnsemble, hidden: ParamMap, rng):
    if mode == "probabilistic":
        return ensemble
    if mode == "deterministic":
        return ensemble.sample(rng)
    if mode == "uniform":
        return uniform_model(ensemble)
    if mode == "oracle":
        return hidden
    raise ValueError(f"unknown planning mode {mode!r}; choose from {PLAN_MODES}")


@dataclass
class PreparedTrial:
    """Identification outcome plus the execution world's rng state right after it."""

    scene: object
    seed: int
    session: object = None
    rng_state: dict = None
    error: str | None = None
    seconds: float = 0.0

    def world(self) -> World:
        w = World(self.scene.obj, self.scene.hidden, self.scene.noise, table=self.scene.table)
        w.rng.bit_generator.state = self.rng_state
        return w


def identify_trial(scene, seed: int, cfg: PipelineConfig = None) -> PreparedTrial:
    """Exploration pushes and ensemble inference shared by every planning mode."""
    cfg = cfg or PipelineConfig()
    world = World(scene.obj, scene.hidden, scene.noise, seed=derive_seed(seed, "world"),
                  table=scene.table)
    t0 = time.perf_counter()
    try:
        session = run_identification_session(
            scene.obj, world, cfg.ident, cfg.explore_mode, start=scene.start_body,
            rng=np.random.default_rng(derive_seed(seed, "explore")), explore_cfg=cfg.explore)
    except WorkspaceExceeded as exc:
        log.info("trial %s: %s", seed, exc)
        return PreparedTrial(scene, seed, error="WorkspaceExceeded")
    return PreparedTrial(scene, seed, session, world.rng.bit_generator.state,
                         seconds=time.perf_counter() - t0)


def _blank_report(mode, seed) -> dict:
    return {"mode": mode, "seed": seed, "success": False, "n_actions": 0, "goal_pose": None,
            "fell": False, "reached": False, "error": None, "exploration_pushes": 0,
            "final_pose": None, "actions": []}


def plan_and_execute(scene, model, seed: int, cfg: PipelineConfig, world: World,
                     body, report: dict) -> dict:
    """Goal sampling, closed-loop pushing and the final balance verdict.

    ``model`` is whatever the planner is allowed to believe (ensemble or
    ParamMap); ``world`` executes with the hidden parameters. Fills and
    returns ``report``. :class:`NoStableGoal` is recorded under
    ``error`` like every other failure.
    """
    obj, table = scene.obj, scene.table
    goal_rng = np.random.default_rng(derive_seed(seed, "goal"))
    query = GoalQuery(epsilon=cfg.epsilon, arc_center=goal_rng.uniform(-math.pi, math.pi),
                      arc_half_width=cfg.arc_half_width, reference_theta=body.rotation,
                      n_samples=cfg.goal_samples)
    t0 = time.perf_counter()
    try:
        goal = sample_stable_goal(obj, query, model, table, goal_rng)
    except NoStableGoal as exc:
        report["error"] = "NoStableGoal"
        log.info("trial %s/%s: %s", report["mode"], seed, exc)
        return report
    report["goal_pose"] = [float(v) for v in goal]
    t1 = time.perf_counter()
    try:
        result = robust_plan(obj, body, goal, model, world, cfg.plan,
                             rng=np.random.default_rng(derive_seed(seed, "rrt")))
    except (PlanningFailed, ExecutionDiverged) as exc:
        report["error"] = type(exc).__name__
        log.info("trial %s/%s: %s", report["mode"], seed, exc)
        return report
    final = result.final
    fell = result.fell or not balance_check(obj, final, scene.hidden, table)
    report.update(n_actions=len(result.actions), reached=result.reached, fell=fell,
                  success=bool(result.reached and not fell),
                  final_pose=[float(v) for v in final.pose],
                  actions=[{"cell": a.contact_cell, "fx": float(a.force[0]), "fy": float(a.force[1]),
                            "duration": float(a.duration)} for a in result.actions])
    log.debug("trial %s/%s: goal %.3fs, plan %.3fs", report["mode"], seed, t1 - t0,
              time.perf_counter() - t1)
    return report


def pregrasp_pipeline(scene, mode: str, seed: int, cfg: PipelineConfig = None,
                      prepared: "PreparedTrial" = None) -> dict:
    """Run one trial and return its report.

    All random streams hang off ``seed`` and are shared between modes, so
    trials with equal seeds see the same exploration pushes, execution
    noise and goal-region draws; only the model given to the planner
    differs. Failures are recorded in the report, not raised. Passing
    ``prepared`` (from :func:`identify_trial` with the same seed and
    config) skips re-running the identification pushes.
    """
    cfg = cfg or PipelineConfig()
    if mode not in PLAN_MODES:
        raise ValueError(f"unknown planning mode {mode!r}; choose from {PLAN_MODES}")
    report = _blank_report(mode, seed)
    prepared = prepared or identify_trial(scene, seed, cfg)
    if prepared.error is not None:
        report["error"] = prepared.error
        return report
    session = prepared.session
    report["exploration_pushes"] = len(session.actions)
    log.debug("trial %s/%s: identification %.3fs", mode, seed, prepared.seconds)
    model = planning_model(mode, session.ensemble, scene.hidden,
                           np.random.default_rng(derive_seed(seed, "draw")))
    return plan_and_execute(scene, model, seed, cfg, prepared.world(),
                            session.trajectory.bodies[-1], report)


def plan_from_ensemble(scene, ensemble: ModelEnsemble, mode: str, seed: int,
                       cfg: PipelineConfig = None) -> dict:
    """Plan from the scene's start pose with an ensemble identified elsewhere."""
    cfg = cfg or PipelineConfig()
    if mode not in PLAN_MODES:
        raise ValueError(f"unknown planning mode {mode!r}; choose from {PLAN_MODES}")
    if ensemble.models[0].n != scene.obj.n:
        raise ValueError(f"ensemble has {ensemble.models[0].n} cells, scene object has {scene.obj.n}")
    model = planning_model(mode, ensemble, scene.hidden,
                           np.random.default_rng(derive_seed(seed, "draw")))
    world = World(scene.obj, scene.hidden, scene.noise, seed=derive_seed(seed, "world"),
                  table=scene.table)
    return plan_and_execute(scene, model, seed, cfg, world, scene.start_body,
                            _blank_report(mode, seed))
