"""Mass and friction identification by gradient descent through the predictor.

The loss is the teacher-forced one-step error: from every observed state,
push once with the recorded command and compare the predicted cell state
vector with the next observation. Gradients come from differentiating the
twist solve (implicit function theorem) and the SE(2) pose update, one
transition at a time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (FrictionModel, WorldConfig, action_in_body, breakaway_force,
                       footprint_clearance, integrate_pose, solve_twist)
from .errors import WorkspaceExceeded
from .geometry import BodyState, GridObject, ParamMap, Trajectory, wrap_angle

log = logging.getLogger(__name__)

MASS_FLOOR = 1e-6  # kg, realizes the open lower bound on cell masses
FRICTION_FLOOR = 1e-4  # keeps the fitted object from becoming frictionless


@dataclass(frozen=True)
class IdentConfig:
    """Settings of the bound-sweeping ensemble inference.

    ``learning_rate`` is the largest per-update change of a parameter,
    measured as a fraction of that parameter's upper bound.
    ``temperature=None`` picks ``mean(loss) / ln(10)``.
    """

    K: int = 20
    learning_rate: float = 0.05
    temperature: float | None = None
    mass_max: float = 0.05
    friction_max: float = 1.0
    epochs: int = 60
    nb_actions: int = 5

    def __post_init__(self):
        if self.K < 2 or self.K % 2:
            raise ValueError("K must be even and at least 2")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.temperature is not None and not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not (self.mass_max > MASS_FLOOR and self.friction_max > 0):
            raise ValueError("upper bounds must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def sweep_bounds(self) -> np.ndarray:
        """Per-model (friction bound, mass bound), shape (K, 2)."""
        k = np.arange(1, self.K + 1)
        first = k <= self.K // 2
        fric = np.where(first, 2 * k / self.K * self.friction_max, self.friction_max)
        mass = np.where(first, self.mass_max, (2 * k / self.K - 1) * self.mass_max)
        return np.stack([fric, mass], axis=1)


def softmax_probabilities(losses, temperature=None) -> np.ndarray:
    losses = np.asarray(losses, dtype=float)
    if temperature is None:
        mean = losses.mean()
        temperature = mean / math.log(10.0) if mean > 0 else 1.0
    if math.isinf(temperature):
        return np.full(losses.size, 1.0 / losses.size)
    z = -(losses - losses.min()) / temperature
    w = np.exp(z)
    return w / w.sum()


@dataclass(frozen=True)
class ModelEnsemble:
    """K (mass, friction) maps with their losses and softmax probabilities."""

    models: tuple
    losses: np.ndarray
    probabilities: np.ndarray
    bounds: np.ndarray = field(default=None)

    def __post_init__(self):
        K = len(self.models)
        losses = np.asarray(self.losses, dtype=float).reshape(K)
        probs = np.asarray(self.probabilities, dtype=float).reshape(K)
        if K == 0:
            raise ValueError("an ensemble needs at least one model")
        if abs(probs.sum() - 1.0) > 1e-9 or np.any(probs < 0):
            raise ValueError("probabilities must be a distribution")
        bounds = np.full((K, 2), np.nan) if self.bounds is None else np.asarray(self.bounds, dtype=float)
        for name, arr in (("losses", losses), ("probabilities", probs), ("bounds", bounds)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return len(self.models)

    @property
    def masses(self) -> np.ndarray:
        return np.array([m.mass for m in self.models])

    @property
    def frictions(self) -> np.ndarray:
        return np.array([m.friction for m in self.models])

    @property
    def products(self) -> np.ndarray:
        return self.masses * self.frictions

    def expected_breakaway(self, gravity: float = 9.8) -> float:
        return float(self.probabilities @ breakaway_force(self.products, gravity))

    def sample(self, rng: np.random.Generator) -> ParamMap:
        return self.models[int(rng.choice(self.K, p=self.probabilities))]

    @classmethod
    def single(cls, params: ParamMap) -> "ModelEnsemble":
        return cls((params,), np.zeros(1), np.ones(1))

    @classmethod
    def from_models(cls, models, losses, temperature=None, bounds=None) -> "ModelEnsemble":
        return cls(tuple(models), losses, softmax_probabilities(losses, temperature), bounds)


# --- loss and gradient -------------------------------------------------------

def _transition_inputs(obj: GridObject, traj: Trajectory):
    contacts, forces, durations = [], [], []
    for body, act in zip(traj.bodies[:-1], traj.actions):
        c, f = action_in_body(obj, body, act)
        contacts.append(c)
        forces.append(f)
        durations.append(act.duration)
    poses = np.array([b.pose for b in traj.bodies[:-1]])
    return poses, np.array(contacts), np.array(forces), np.array(durations)


def _batch_loss(obj, poses, contacts, forces, durations, targets, products, friction,
                gradient=False, init=None):
    """Per-transition losses (and d loss / d products) for a batch of models.

    Transitions broadcast over the leading axes of poses/contacts/forces,
    models over the leading axes of ``products``. Returns losses with the
    broadcast batch shape and gradients with an extra trailing n axis.
    """
    offsets = obj.offsets
    out = solve_twist(obj, contacts, forces, products, friction, jacobian=gradient, init=init)
    twist, dtwist = out if gradient else (out, None)
    new, dpose = integrate_pose(poses, twist, durations, jacobian=True)
    c, s = np.cos(new[..., 2]), np.sin(new[..., 2])
    wx = c[..., None] * offsets[:, 0] - s[..., None] * offsets[:, 1]  # R r_i
    wy = s[..., None] * offsets[:, 0] + c[..., None] * offsets[:, 1]
    tx = np.asarray(targets)[..., 0::3]
    ty = np.asarray(targets)[..., 1::3]
    tth = np.asarray(targets)[..., 2::3]
    ex = new[..., 0:1] + wx - tx
    ey = new[..., 1:2] + wy - ty
    eth = wrap_angle(new[..., 2:3] - tth)
    loss = np.sqrt((ex * ex + ey * ey + eth * eth).sum(-1))
    if not gradient:
        return loss, twist
    safe = np.where(loss > 1e-12, loss, np.inf)
    dl_dpose = np.stack([ex.sum(-1), ey.sum(-1), (-ex * wy + ey * wx + eth).sum(-1)], axis=-1)
    dl_dpose = dl_dpose / safe[..., None]
    dl_dtwist = np.einsum("...i,...ij->...j", dl_dpose, dpose)
    dl_dp = np.einsum("...j,...jn->...n", dl_dtwist, dtwist)
    return loss, twist, dl_dp


def _check_traj(obj: GridObject, traj: Trajectory, params: ParamMap):
    if traj.T < 1:
        raise ValueError("trajectory needs at least one push")
    if traj.cells.shape[1] != 3 * obj.n or params.n != obj.n:
        raise ValueError("dimension mismatch between object, trajectory and params")


def trajectory_loss(obj: GridObject, traj: Trajectory, params: ParamMap,
                    friction: FrictionModel | WorldConfig = None) -> float:
    """Sum over pushes of the one-step cell-state error from each observed state."""
    friction = _friction(friction)
    _check_traj(obj, traj, params)
    poses, contacts, forces, durations = _transition_inputs(obj, traj)
    loss, _ = _batch_loss(obj, poses, contacts, forces, durations, traj.cells[1:],
                          params.products, friction)
    return float(loss.sum())


def loss_gradient(obj: GridObject, traj: Trajectory, params: ParamMap,
                  friction: FrictionModel | WorldConfig = None):
    """Analytic (d loss / d mass, d loss / d friction), each of length n."""
    friction = _friction(friction)
    _check_traj(obj, traj, params)
    poses, contacts, forces, durations = _transition_inputs(obj, traj)
    _, _, dp = _batch_loss(obj, poses, contacts, forces, durations, traj.cells[1:],
                           params.products, friction, gradient=True)
    dp = dp.sum(0)
    return params.friction * dp, params.mass * dp


def _friction(cfg) -> FrictionModel:
    if cfg is None:
        return FrictionModel()
    if isinstance(cfg, WorldConfig):
        return cfg.friction
    return cfg


def _project(mass, friction, mass_max, friction_max):
    return np.clip(mass, MASS_FLOOR, mass_max), np.clip(friction, 0.0, friction_max)


def projected_update(params: ParamMap, gradients, rate: float, bounds) -> ParamMap:
    """One gradient step followed by clamping into the parameter box.

    ``bounds`` is ``(mass_max, friction_max)``; masses stay in
    ``[MASS_FLOOR, mass_max]`` and frictions in ``[0, friction_max]``.
    """
    grad_m, grad_mu = gradients
    mass_max, friction_max = bounds
    if not (mass_max > 0 and friction_max > 0):
        raise ValueError("bounds must be positive")
    m, mu = _project(params.mass - rate * np.asarray(grad_m),
                     params.friction - rate * np.asarray(grad_mu), mass_max, friction_max)
    return ParamMap(m, mu)


# --- ensemble inference ------------------------------------------------------

def _fit_models(obj, traj, mass_max, fric_max, cfg: IdentConfig, friction: FrictionModel):
    """Projected gradient descent for K bound pairs at once.

    Each epoch takes one full-batch projected step in the raw (mass,
    friction) coordinates. Step lengths follow the Barzilai-Borwein rule;
    a step that raises the loss is discarded and the step length halved,
    so accepted losses never increase. The first step moves no parameter
    by more than ``cfg.learning_rate`` of its upper bound.

    Raw coordinates matter here: a mass gradient is scaled by friction
    and vice versa, so descent mostly moves whichever parameter is
    numerically smaller. Bound sweeping then yields genuinely different
    mass maps instead of rescaled copies of one.
    """
    K, n = mass_max.size, obj.n
    upper = np.concatenate([np.repeat(mass_max[:, None], n, 1),
                            np.repeat(fric_max[:, None], n, 1)], axis=1)
    lower = np.concatenate([np.full((K, n), MASS_FLOOR), np.full((K, n), FRICTION_FLOOR)], axis=1)
    poses, contacts, forces, durations = _transition_inputs(obj, traj)
    poses, contacts, forces = poses[:, None], contacts[:, None], forces[:, None]
    durations, targets = durations[:, None], traj.cells[1:][:, None]

    def evaluate(x):
        m, f = x[:, :n], x[:, n:]
        loss, _, dp = _batch_loss(obj, poses, contacts, forces, durations, targets,
                                  (m * f)[None], friction, gradient=True)
        dp = dp.sum(0)
        return loss.sum(0), np.concatenate([f * dp, m * dp], axis=1)

    x = 0.5 * upper
    loss, grad = evaluate(x)
    gmax = np.abs(grad / upper).max(1)
    step = cfg.learning_rate / np.where(gmax > 0, gmax, 1.0)
    for _ in range(cfg.epochs):
        x_new = np.clip(x - step[:, None] * grad, lower, upper)
        loss_new, grad_new = evaluate(x_new)
        ok = loss_new <= loss
        s = x_new - x
        y = grad_new - grad
        sy = (s * y).sum(1)
        ss = (s * s).sum(1)
        bb = np.where(sy > 0, ss / np.where(sy > 0, sy, 1.0), 4.0 * step)
        step = np.where(ok, bb, 0.5 * step)
        x = np.where(ok[:, None], x_new, x)
        loss = np.where(ok, loss_new, loss)
        grad = np.where(ok[:, None], grad_new, grad)
    return x[:, :n], x[:, n:], loss


def infer_models(obj: GridObject, traj: Trajectory, cfg: IdentConfig = None,
                 world_cfg: WorldConfig | FrictionModel = None) -> ModelEnsemble:
    """Fit K models under swept upper bounds and weight them by softmax(-loss / tau)."""
    cfg = cfg or IdentConfig()
    friction = _friction(world_cfg)
    if traj.T < 1:
        raise ValueError("trajectory needs at least one push")
    bounds = cfg.sweep_bounds()
    mass, fric, losses = _fit_models(obj, traj, bounds[:, 1], bounds[:, 0], cfg, friction)
    models = [ParamMap(m, f) for m, f in zip(mass, fric)]
    ens = ModelEnsemble.from_models(models, losses, cfg.temperature, bounds)
    log.debug("inferred %d models from %d pushes, losses %s", cfg.K, traj.T, np.round(losses, 5))
    return ens


@dataclass
class SessionResult:
    ensemble: ModelEnsemble
    actions: list
    trajectory: Trajectory
    history: list  # ensemble after each push


def run_identification_session(obj: GridObject, world, cfg: IdentConfig = None,
                               selection_mode: str = "random", start: BodyState = None,
                               rng=None, explore_cfg=None) -> SessionResult:
    """Push the object ``cfg.nb_actions`` times and re-infer the ensemble after each push.

    The first push is a small random one; later pushes come from
    :func:`pushident.exploration.select_action`. Raises
    :class:`WorkspaceExceeded` (carrying the partial result) if the
    footprint leaves the world's table.
    """
    from .exploration import ExploreConfig, sample_candidates, select_action

    cfg = cfg or IdentConfig()
    explore_cfg = explore_cfg or ExploreConfig()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    body = (start or BodyState(np.zeros(2))).at_rest()
    friction = world.cfg.friction
    dt = world.cfg.dt
    bodies, actions, history = [body], [], []
    ensemble = None
    prior = np.full(obj.n, 0.25 * cfg.mass_max * cfg.friction_max)
    for k in range(cfg.nb_actions):
        if ensemble is None:
            cands = sample_candidates(obj, body, prior, rng, explore_cfg, dt,
                                      force_range=explore_cfg.first_force_range,
                                      gravity=friction.gravity)
            action = select_action("random", cands, actions, None, obj, body, friction, rng)
        else:
            cands = sample_candidates(obj, body, ensemble.probabilities @ ensemble.products,
                                      rng, explore_cfg, dt, gravity=friction.gravity)
            action = select_action(selection_mode, cands, actions, ensemble, obj, body,
                                   friction, rng)
        body = world.execute(body, action).at_rest()
        actions.append(action)
        bodies.append(body)
        traj = Trajectory.from_bodies(obj, bodies, actions, dt)
        if world.table is not None and footprint_clearance(obj, body.pose, world.table) < 0:
            partial = SessionResult(ensemble, actions, traj, history)
            raise WorkspaceExceeded(f"object left the table after push {k + 1}", partial)
        ensemble = infer_models(obj, traj, cfg, friction)
        history.append(ensemble)
    return SessionResult(ensemble, actions, traj, history)
