"""Push planning under an ensemble of inferred mass/friction models.

Three layers: RRT* produces SE(2) waypoints that keep the footprint on the
table, :func:`select_push` scores candidate pushes by their
probability-weighted distance to the next target, and :func:`robust_plan`
runs that choice in closed loop against an execution world.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (FrictionModel, Table, breakaway_force, center_of_mass,
                       footprint_clearance, integrate_pose, solve_twist)
from .errors import ExecutionDiverged, NoStableGoal, PlanningFailed
from .geometry import BodyState, GridObject, PushAction, add_distance, rotation, wrap_angle

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlanConfig:
    """Knobs for waypoint generation and push selection.

    ``reach`` bounds how far ahead (ADD, meters) the tracked waypoint may
    lie; ``force_levels`` are multiples of the expected breakaway force and
    ``direction_offsets`` rotate the inward normal (radians).
    """

    eta: float = 0.05
    max_nodes: int = 5000
    goal_bias: float = 0.1
    edge_resolution: float = 0.01
    eps_wp: float = 0.01
    timeout: int = 16
    stall_limit: int = 10
    max_actions: int = 30
    reach: float = 0.15
    force_levels: tuple = tuple(np.round(np.geomspace(0.08, 4.0, 18), 4))
    direction_offsets: tuple = (-math.radians(20), 0.0, math.radians(20))
    duration: float = 1.0

    def __post_init__(self):
        if not (self.eta > 0 and self.eps_wp > 0 and self.reach > 0):
            raise ValueError("eta, eps_wp and reach must be positive")
        if self.max_nodes < 1 or self.timeout < 1 or self.stall_limit < 1:
            raise ValueError("budgets must be >= 1")


@dataclass(frozen=True)
class GoalQuery:
    """Where to look for a pre-grasp pose and how safe it must be.

    The goal region is the band around the table edge at polar angles
    ``arc_center +- arc_half_width``; orientations are drawn within
    ``orientation_window`` of ``reference_theta``. ``overhang=None`` means
    two cell widths. ``com_margin=None`` means one cell width of required
    clearance between each model's COM and the edge.
    """

    epsilon: float = 0.1
    overhang: float | None = None
    arc_center: float = 0.0
    arc_half_width: float = math.radians(30)
    reference_theta: float = 0.0
    orientation_window: float = math.pi
    n_samples: int = 200
    com_margin: float | None = None

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.overhang is not None and not self.overhang > 0:
            raise ValueError("required overhang must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass
class PlanResult:
    actions: list = field(default_factory=list)
    expected_gaps: list = field(default_factory=list)
    reached: bool = False
    waypoints_consumed: int = 0
    bodies: list = field(default_factory=list)
    fell: bool = False

    @property
    def final(self) -> BodyState:
        return self.bodies[-1]


# --- ensembles seen as arrays ------------------------------------------------

def _as_arrays(ensemble):
    """(masses (K, n), products (K, n), probabilities (K,)) of an ensemble or ParamMap."""
    if hasattr(ensemble, "probabilities"):
        return ensemble.masses, ensemble.products, np.asarray(ensemble.probabilities)
    return ensemble.mass[None], ensemble.products[None], np.ones(1)


def failure_probability(obj: GridObject, pose, ensemble, table: Table,
                        margin: float = 0.0) -> np.ndarray:
    """Total probability of the models whose COM is not at least ``margin`` inside the table.

    ``pose`` may be batched (..., 3); the result has the batch shape. The
    sum is correctly rounded (``math.fsum``), so it does not depend on the
    order in which failing models are added up. Normalized probabilities
    can total 1 + a few ulp, hence the cap.
    """
    masses, _, probs = _as_arrays(ensemble)
    pose = np.asarray(pose, dtype=float)
    com = center_of_mass(obj, pose[..., None, :], masses)  # (..., K, 2)
    unstable = table.signed_distance(com) < margin
    flat = unstable.reshape(-1, probs.size)
    out = np.array([min(math.fsum(probs[row]), 1.0) for row in flat])
    return out.reshape(unstable.shape[:-1])


def expected_com(obj: GridObject, pose, ensemble) -> np.ndarray:
    masses, _, probs = _as_arrays(ensemble)
    com = center_of_mass(obj, np.asarray(pose)[None], masses)
    return probs @ com


# --- goal sampling -----------------------------------------------------------

def sample_stable_goal(obj: GridObject, query: GoalQuery, ensemble, table: Table,
                       rng: np.random.Generator) -> np.ndarray:
    """Pose near the edge with enough overhang and failure probability <= epsilon.

    Among ``query.n_samples`` random draws the qualifying pose with the
    largest overhang wins. Raises :class:`NoStableGoal` if none qualifies.
    """
    need = query.overhang if query.overhang is not None else 2 * obj.cell_width
    margin = query.com_margin if query.com_margin is not None else obj.cell_width
    poses = _edge_samples(obj, query, table, rng)
    over = -footprint_clearance(obj, poses, table)
    fail = failure_probability(obj, poses, ensemble, table, margin)
    ok = (over >= need) & (fail <= query.epsilon + 1e-12)
    if not ok.any():
        raise NoStableGoal(f"none of {len(poses)} edge poses is stable with overhang >= {need:.3f} m")
    best = int(np.argmax(np.where(ok, over, -np.inf)))
    return poses[best]


def _edge_samples(obj, query, table, rng):
    m = query.n_samples
    phi = query.arc_center + rng.uniform(-query.arc_half_width, query.arc_half_width, m)
    rc = obj.circumradius
    radius = table.radius + rng.uniform(-rc, rc, m)
    theta = wrap_angle(query.reference_theta
                       + rng.uniform(-query.orientation_window, query.orientation_window, m))
    c = np.asarray(table.center, dtype=float)
    return np.stack([c[0] + radius * np.cos(phi), c[1] + radius * np.sin(phi), theta], axis=1)


def edge_poses(obj: GridObject, table: Table, rng: np.random.Generator, count: int = 10,
               overhang: float = None) -> np.ndarray:
    """``count`` random poses whose footprint protrudes ``overhang`` past the edge."""
    need = overhang if overhang is not None else 2 * obj.cell_width
    out = []
    while len(out) < count:
        phi = rng.uniform(-math.pi, math.pi)
        theta = rng.uniform(-math.pi, math.pi)
        lo, hi = table.radius - obj.circumradius, table.radius + obj.circumradius
        for _ in range(40):  # bisect the radial position to hit the overhang exactly
            mid = 0.5 * (lo + hi)
            pose = np.array([mid * math.cos(phi), mid * math.sin(phi), theta])
            pose[:2] += table.center
            if -footprint_clearance(obj, pose, table) < need:
                lo = mid
            else:
                hi = mid
        pose = np.array([hi * math.cos(phi), hi * math.sin(phi), theta])
        pose[:2] += table.center
        out.append(pose)
    return np.array(out)


# --- RRT* ----------------------------------------------------------------------

def pose_metric(obj: GridObject, a, b) -> np.ndarray:
    """Translation distance plus circumradius times absolute angle difference."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    d = np.linalg.norm(a[..., :2] - b[..., :2], axis=-1)
    return d + obj.circumradius * np.abs(wrap_angle(a[..., 2] - b[..., 2]))


def _interpolate(a, b, fractions):
    a, b = np.asarray(a), np.asarray(b)
    f = np.asarray(fractions)[:, None]
    delta = np.r_[b[:2] - a[:2], wrap_angle(b[2] - a[2])]
    out = a + f * delta
    out[:, 2] = wrap_angle(out[:, 2])
    return out


def _edge_free(obj, table, a, b, cfg, allow_end=False) -> bool:
    """Footprint stays on the table along the straight SE(2) segment a -> b."""
    length = float(pose_metric(obj, a, b))
    k = max(2, int(math.ceil(length / cfg.edge_resolution)) + 1)
    pts = _interpolate(a, b, np.linspace(0.0, 1.0, k))
    if allow_end:
        # the approach into an overhanging goal has to overhang too: corners move
        # at most pose_metric, so poses closer than (goal overhang + eta) are exempt
        exempt = max(0.0, -float(footprint_clearance(obj, b, table))) + cfg.eta
        keep = np.linspace(0.0, 1.0, k) * length < length - exempt
        pts = pts[keep]
        if pts.size == 0:
            return True
    return bool(np.all(footprint_clearance(obj, pts, table) >= 0))


def _steer(obj, a, b, eta):
    d = float(pose_metric(obj, a, b))
    if d <= eta:
        return np.asarray(b, dtype=float)
    return _interpolate(a, b, [eta / d])[0]


def _densify(obj, path, eta):
    out = [path[0]]
    for a, b in zip(path[:-1], path[1:]):
        d = float(pose_metric(obj, a, b))
        k = max(1, int(math.ceil(d / eta - 1e-9)))
        out.extend(_interpolate(a, b, np.arange(1, k + 1) / k))
    return np.array(out)


def rrt_star(obj: GridObject, start, goal, table: Table, rng: np.random.Generator,
             cfg: PlanConfig = None) -> np.ndarray:
    """Waypoints (m, 3) from ``start`` (excluded) to ``goal`` (included).

    Every waypoint but the goal keeps the footprint on the table and
    consecutive waypoints are at most ``cfg.eta`` apart in
    :func:`pose_metric`. Raises :class:`PlanningFailed` when the goal
    cannot be connected within ``cfg.max_nodes`` nodes.
    """
    cfg = cfg or PlanConfig()
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if footprint_clearance(obj, start, table) < 0:
        raise PlanningFailed("start pose is not on the table")
    if table.signed_distance(goal[:2]) < -obj.circumradius:
        raise PlanningFailed("goal footprint does not touch the table")
    if pose_metric(obj, start, goal) <= 1e-12:
        return goal[None].copy()
    if _edge_free(obj, table, start, goal, cfg, allow_end=True):
        return _densify(obj, np.array([start, goal]), cfg.eta)[1:]

    nodes = np.empty((cfg.max_nodes, 3))
    parent = np.full(cfg.max_nodes, -1)
    cost = np.zeros(cfg.max_nodes)
    nodes[0] = start
    count = 1
    best_goal, best_cost = -1, np.inf
    gamma = 2.0 * table.radius
    center = np.asarray(table.center, dtype=float)
    while count < cfg.max_nodes:
        if rng.random() < cfg.goal_bias:
            sample = goal
        else:
            r = table.radius * math.sqrt(rng.random())
            a = rng.uniform(-math.pi, math.pi)
            sample = np.array([center[0] + r * math.cos(a), center[1] + r * math.sin(a),
                               rng.uniform(-math.pi, math.pi)])
        dist = pose_metric(obj, nodes[:count], sample)
        near_idx = int(np.argmin(dist))
        new = _steer(obj, nodes[near_idx], sample, cfg.eta)
        if footprint_clearance(obj, new, table) < 0:
            continue
        d_new = pose_metric(obj, nodes[:count], new)
        # shrinking rewiring ball, never below one steering step
        radius = max(cfg.eta, min(3 * cfg.eta, gamma * (math.log(count + 1) / (count + 1)) ** (1 / 3)))
        near = np.nonzero(d_new <= radius)[0]
        order = near[np.argsort(cost[near] + d_new[near])]
        chosen = -1
        for j in order:
            if _edge_free(obj, table, nodes[j], new, cfg):
                chosen = int(j)
                break
        if chosen < 0:
            continue
        nodes[count] = new
        parent[count] = chosen
        cost[count] = cost[chosen] + d_new[chosen]
        idx = count
        count += 1
        for j in near:  # rewire
            c = cost[idx] + d_new[j]
            if c + 1e-12 < cost[j] and _edge_free(obj, table, new, nodes[j], cfg):
                parent[j] = idx
                cost[j] = c
        dg = float(pose_metric(obj, new, goal))
        if cost[idx] + dg < best_cost and _edge_free(obj, table, new, goal, cfg, allow_end=True):
            best_goal, best_cost = idx, cost[idx] + dg
            break
    if best_goal < 0:
        raise PlanningFailed(f"no path to the goal within {cfg.max_nodes} nodes")
    path = [goal]
    j = best_goal
    while j >= 0:
        path.append(nodes[j])
        j = parent[j]
    path = np.array(path[::-1])
    return _densify(obj, path, cfg.eta)[1:]


# --- push selection -------------------------------------------------------------

def _contour_search(obj: GridObject, seed_cell: int, limit: int) -> list:
    """Seed cell followed by contour neighbors in breadth-first order, ``limit`` cells total."""
    order, seen = [seed_cell], {seed_cell}
    head = 0
    while head < len(order) and len(order) < limit:
        for nb in obj.contour_neighbors(order[head]):
            if nb not in seen:
                seen.add(nb)
                order.append(nb)
                if len(order) >= limit:
                    break
        head += 1
    return order


def seed_contact(obj: GridObject, pose, target_pose, ensemble) -> int:
    """Contour cell behind the expected COM as seen from the target."""
    x_hat = expected_com(obj, pose, ensemble)
    x_tgt = expected_com(obj, target_pose, ensemble)
    axis = x_hat - x_tgt
    pts = center_of_mass(obj, np.asarray(pose)[None], np.eye(obj.n))  # cell centers, world
    cells = np.array(obj.contour_cells)
    rel = pts[cells] - x_hat
    na = np.linalg.norm(axis)
    if na < 1e-12:
        return int(cells[0])
    cos = rel @ axis / (np.linalg.norm(rel, axis=1) * na + 1e-15)
    return int(cells[int(np.argmax(cos))])


def push_candidates(obj: GridObject, body: BodyState, target_pose, ensemble,
                    cfg: PlanConfig, gravity: float = 9.8) -> list:
    """Candidate pushes around the alignment seed; order is deterministic."""
    _, products, probs = _as_arrays(ensemble)
    base = float(probs @ breakaway_force(products, gravity))
    cells = _contour_search(obj, seed_contact(obj, body.pose, target_pose, ensemble), cfg.timeout)
    R = rotation(body.rotation)
    out = []
    for cell in cells:
        for normal in obj.normals_of(cell):
            inward = -np.asarray(normal, dtype=float)
            for off in cfg.direction_offsets:
                d = R @ rotation(off) @ inward
                for lvl in cfg.force_levels:
                    out.append(PushAction(cell, base * lvl * d, cfg.duration))
    return out


def expected_gaps(obj: GridObject, body: BodyState, candidates, target_pose, ensemble,
                  friction: FrictionModel) -> np.ndarray:
    """Probability-weighted ADD between each candidate's predicted pose and the target."""
    _, products, probs = _as_arrays(ensemble)
    R_T = rotation(body.rotation).T
    contacts = np.array([obj.offsets[a.contact_cell] for a in candidates])
    forces = np.array([R_T @ a.force for a in candidates])
    durations = np.array([a.duration for a in candidates])
    tw = solve_twist(obj, contacts[:, None], forces[:, None], products[None], friction)
    pred = integrate_pose(body.pose, tw, durations[:, None])  # (C, K, 3)
    gaps = add_distance(obj, pred, np.asarray(target_pose))
    return gaps @ probs


def select_push(obj: GridObject, body: BodyState, target_pose, ensemble,
                cfg: PlanConfig = None, friction: FrictionModel = None):
    """(action, expected gap) minimizing the expected gap over the candidate set."""
    cfg = cfg or PlanConfig()
    friction = friction or FrictionModel()
    cands = push_candidates(obj, body, target_pose, ensemble, cfg, friction.gravity)
    gaps = expected_gaps(obj, body, cands, target_pose, ensemble, friction)
    best = int(np.argmin(gaps))
    return cands[best], float(gaps[best])


# --- closed loop ------------------------------------------------------------------

def robust_plan(obj: GridObject, start: BodyState, goal_pose, ensemble, world,
                cfg: PlanConfig = None, rng: np.random.Generator = None,
                waypoints=None) -> PlanResult:
    """Track RRT* waypoints with expected-gap pushes, observing after every push.

    The tracked target is the farthest remaining waypoint within
    ``cfg.reach`` of the current pose; waypoints the object has passed are
    dropped. Stops with ``reached=True`` once the goal is within
    ``cfg.eps_wp``, with ``reached=False`` when the action budget runs out
    or the object falls. Raises :class:`ExecutionDiverged` when the
    distance to the goal has not improved for ``cfg.stall_limit`` pushes.
    """
    cfg = cfg or PlanConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    goal_pose = np.asarray(goal_pose, dtype=float)
    body = start.at_rest()
    result = PlanResult(bodies=[body])
    if add_distance(obj, body.pose, goal_pose) <= cfg.eps_wp:
        result.reached = True
        return result
    if waypoints is None:
        waypoints = rrt_star(obj, body.pose, goal_pose, world.table, rng, cfg)
    waypoints = np.asarray(waypoints)
    idx = 0
    best_dist, since_best = np.inf, 0
    friction = world.cfg.friction
    while len(result.actions) < cfg.max_actions:
        dists = add_distance(obj, waypoints[idx:], body.pose)
        k = int(np.argmin(dists))
        idx += k
        result.waypoints_consumed += k
        if idx < len(waypoints) - 1 and dists[k] <= cfg.eps_wp:
            idx += 1
            result.waypoints_consumed += 1
        goal_dist = float(add_distance(obj, body.pose, goal_pose))
        if goal_dist <= cfg.eps_wp:
            result.reached = True
            result.waypoints_consumed = len(waypoints)
            return result
        if goal_dist < best_dist - 1e-9:
            best_dist, since_best = goal_dist, 0
        else:
            since_best += 1
            if since_best >= cfg.stall_limit:
                raise ExecutionDiverged(f"no progress toward the goal in {since_best} pushes")
        ahead = add_distance(obj, waypoints[idx:], body.pose)
        within = np.nonzero(ahead <= cfg.reach)[0]
        target = waypoints[idx + (int(within.max()) if within.size else 0)]
        action, gap = select_push(obj, body, target, ensemble, cfg, friction)
        body = world.execute(body, action).at_rest()
        result.actions.append(action)
        result.expected_gaps.append(gap)
        result.bodies.append(body)
        if world.fell(body):
            result.fell = True
            return result
    result.reached = bool(add_distance(obj, body.pose, goal_pose) <= cfg.eps_wp)
    return result
