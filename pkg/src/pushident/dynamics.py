"""Quasi-static velocity predictor and the hidden-parameter ground-truth world.

The object is pushed at one contour cell by a force whose direction is
held fixed in the body frame for the duration of the push (a frictionless
fingertip keeps pressing on the same face). Each cell ``i`` resists with a
regularized Coulomb force

    f_i = -mu_i * M_i * g * (v_i / sqrt(|v_i|^2 + eps_v^2) + kappa * v_i / eps_v)

where ``v_i`` is the cell velocity. Inertia is neglected: the body twist is
the unique solution of the wrench balance between the push and the summed
cell friction, found by Newton's method on the convex dissipation
potential. Because every friction term scales with ``mu_i * M_i``, the
motion depends on the per-cell products only. The twist is constant over a
push, so the pose update is the exact SE(2) exponential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .geometry import (BodyState, GridObject, ParamMap, PushAction, Trajectory,
                       cell_positions, rotation, wrap_angle)


@dataclass(frozen=True)
class FrictionModel:
    gravity: float = 9.8
    regularization_speed: float = 0.02
    viscous_ratio: float = 0.25
    # pushes weaker than this fraction of the breakaway force do not move the object
    static_ratio: float = 0.05

    def __post_init__(self):
        if not self.regularization_speed > 0:
            raise ValueError("regularization_speed must be positive")
        if not self.viscous_ratio > 0:
            raise ValueError("viscous_ratio must be positive")


@dataclass(frozen=True)
class WorldConfig:
    dt: float = 1.0
    force_noise_sigma: float = 0.0
    angle_noise_sigma: float = 0.0
    friction: FrictionModel = field(default_factory=FrictionModel)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.force_noise_sigma < 0 or self.angle_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")

    def noiseless(self) -> "WorldConfig":
        return replace(self, force_noise_sigma=0.0, angle_noise_sigma=0.0)


def breakaway_force(params_or_products, gravity: float = 9.8):
    """Force magnitude at which every cell's Coulomb term saturates."""
    p = params_or_products.products if isinstance(params_or_products, ParamMap) else params_or_products
    return gravity * np.sum(p, axis=-1)


def _sphere(count: int) -> np.ndarray:
    """Deterministic, nearly uniform unit vectors (Fibonacci lattice)."""
    k = np.arange(count) + 0.5
    z = 1.0 - 2.0 * k / count
    phi = np.pi * (1.0 + 5 ** 0.5) * k
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def line_breakaway(obj, contact, direction, products, gravity: float = 9.8,
                   n_dirs: int = 4000) -> np.ndarray:
    """Smallest force along a given line of action that makes the object slide.

    Coulomb friction can absorb the applied wrench ``w`` as long as
    ``w . xi <= sum_i p_i g |v_i(xi)|`` for every body twist ``xi``, so
    the threshold is ``min_xi sum_i p_i g |v_i(xi)| / (w_hat . xi)``. The
    minimum is taken over a fixed lattice of twist directions, which makes
    this a slight overestimate. For a push through the friction centroid
    it equals :func:`breakaway_force`; off-center pushes pivot the object
    and break away earlier.

    ``contact`` and ``direction`` (body frame) are (..., 2); ``products``
    is (n,) or (K, n) with K > 1 averaged by the caller beforehand.
    """
    rc = max(obj.circumradius, 1e-12)
    xi = _sphere(n_dirs) * np.array([1.0, 1.0, 1.0 / rc])
    r = obj.offsets
    vx = xi[:, None, 0] - xi[:, None, 2] * r[None, :, 1]
    vy = xi[:, None, 1] + xi[:, None, 2] * r[None, :, 0]
    speed = np.hypot(vx, vy)  # (D, n)
    h = gravity * speed @ np.asarray(products, dtype=float)  # (D,)
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    w = applied_wrench(contact, d)  # (..., 3)
    power = w @ xi.T  # (..., D)
    ratio = np.where(power > 1e-12, h / np.where(power > 1e-12, power, 1.0), np.inf)
    return ratio.min(axis=-1)


# --- batched twist solver -------------------------------------------------

def applied_wrench(contact, force_body):
    """Wrench about the body origin of a body-frame force at a body-frame point."""
    contact = np.asarray(contact, dtype=float)
    force_body = np.asarray(force_body, dtype=float)
    tau = contact[..., 0] * force_body[..., 1] - contact[..., 1] * force_body[..., 0]
    fx, fy, tau = np.broadcast_arrays(force_body[..., 0], force_body[..., 1], tau)
    return np.stack([fx, fy, tau], axis=-1)


@njit(cache=True)
def _potential(rx, ry, wgt, wax, way, wat, vx, vy, w, eps, kappa, spin):
    acc = 0.0
    for i in range(rx.size):
        ux = vx - w * ry[i]
        uy = vy + w * rx[i]
        u2 = ux * ux + uy * uy
        acc += wgt[i] * (math.sqrt(u2 + eps * eps) - eps
                         + 0.5 * kappa * (u2 + spin * w * w) / eps)
    return acc - wax * vx - way * vy - wat * w


@njit(cache=True)
def _grad_hess(rx, ry, wgt, vx, vy, w, eps, kappa, spin, out):
    """Friction wrench and its twist Jacobian, packed as
    out = [Fx, Fy, tau, h00, h01, h02, h11, h12, h22]."""
    for j in range(9):
        out[j] = 0.0
    for i in range(rx.size):
        ux = vx - w * ry[i]
        uy = vy + w * rx[i]
        q = ux * ux + uy * uy + eps * eps
        inv = 1.0 / math.sqrt(q)
        inv3 = inv / q
        px = ux * inv + kappa * ux / eps
        py = uy * inv + kappa * uy / eps
        a = (uy * uy + eps * eps) * inv3 + kappa / eps
        b = -ux * uy * inv3
        c = (ux * ux + eps * eps) * inv3 + kappa / eps
        wi = wgt[i]
        x, y = rx[i], ry[i]
        out[0] += wi * px
        out[1] += wi * py
        out[2] += wi * (x * py - y * px + kappa * spin * w / eps)
        out[3] += wi * a
        out[4] += wi * b
        out[5] += wi * (b * x - a * y)
        out[6] += wi * c
        out[7] += wi * (c * x - b * y)
        out[8] += wi * (a * y * y - 2.0 * b * x * y + c * x * x + kappa * spin / eps)


@njit(cache=True)
def _solve_sym3(h, r0, r1, r2, out):
    a, b, c, d, e, f = h[3], h[4], h[5], h[6], h[7], h[8]
    A = d * f - e * e
    B = c * e - b * f
    C = b * e - c * d
    D = a * f - c * c
    E = b * c - a * e
    F = a * d - b * b
    det = a * A + b * B + c * C
    out[0] = (A * r0 + B * r1 + C * r2) / det
    out[1] = (B * r0 + D * r1 + E * r2) / det
    out[2] = (C * r0 + E * r1 + F * r2) / det


@njit(cache=True)
def _solve_kernel(rx, ry, wa, wgt, init, eps, kappa, spin, static_ratio, max_iter,
                  want_jac, twist_out, jac_out):
    nb = wgt.shape[0]
    n = rx.size
    gh = np.empty(9)
    st = np.empty(3)
    rmax = 0.0
    for i in range(n):
        rmax = max(rmax, abs(rx[i]), abs(ry[i]))
    tol = 1e-13 * eps
    for k in range(nb):
        wk = wgt[k]
        wax, way, wat = wa[k, 0], wa[k, 1], wa[k, 2]
        total = 0.0
        for i in range(n):
            total += wk[i]
        if math.hypot(wax, way) < static_ratio * total:
            twist_out[k, 0] = 0.0
            twist_out[k, 1] = 0.0
            twist_out[k, 2] = 0.0
            if want_jac:
                for i in range(n):
                    jac_out[k, 0, i] = 0.0
                    jac_out[k, 1, i] = 0.0
                    jac_out[k, 2, i] = 0.0
            continue
        vx, vy, w = init[k, 0], init[k, 1], init[k, 2]
        for _ in range(max_iter):
            _grad_hess(rx, ry, wk, vx, vy, w, eps, kappa, spin, gh)
            g0, g1, g2 = gh[0] - wax, gh[1] - way, gh[2] - wat
            _solve_sym3(gh, -g0, -g1, -g2, st)
            psi0 = _potential(rx, ry, wk, wax, way, wat, vx, vy, w, eps, kappa, spin)
            slope = g0 * st[0] + g1 * st[1] + g2 * st[2]
            t = 1.0
            # backtracking on the strictly convex potential; once the Newton
            # decrement is below the potential's round-off the full step is
            # taken, since comparing potentials there is meaningless
            for _ in range(40 if -slope > 1e-10 * total * eps else 0):
                psi = _potential(rx, ry, wk, wax, way, wat,
                                 vx + t * st[0], vy + t * st[1], w + t * st[2], eps, kappa, spin)
                if psi <= psi0 + 1e-4 * t * slope + 1e-15 * abs(psi0):
                    break
                t *= 0.5
            dx, dy, dw = t * st[0], t * st[1], t * st[2]
            vx += dx
            vy += dy
            w += dw
            if abs(dx) < tol and abs(dy) < tol and abs(dw) * rmax < tol:
                break
        twist_out[k, 0] = vx
        twist_out[k, 1] = vy
        twist_out[k, 2] = w
        if want_jac:
            _grad_hess(rx, ry, wk, vx, vy, w, eps, kappa, spin, gh)
            for i in range(n):
                ux = vx - w * ry[i]
                uy = vy + w * rx[i]
                inv = 1.0 / math.sqrt(ux * ux + uy * uy + eps * eps)
                px = ux * inv + kappa * ux / eps
                py = uy * inv + kappa * uy / eps
                # d(wrench)/d(weight_i) = J_i^T phi_i
                pt = rx[i] * py - ry[i] * px + kappa * spin * w / eps
                _solve_sym3(gh, -px, -py, -pt, st)
                jac_out[k, 0, i] = st[0]
                jac_out[k, 1, i] = st[1]
                jac_out[k, 2, i] = st[2]


def solve_twist(obj: GridObject, contact, force_body, products, friction: FrictionModel,
                jacobian: bool = False, init=None, max_iter: int = 60):
    """Body-frame twist ``(vx, vy, omega)`` balancing push and cell friction.

    Each cell resists with regularized Coulomb plus viscous friction at its
    center; the viscous part also acts on the cell's own spin, which keeps
    the problem well posed for single-cell objects.

    All inputs broadcast over leading batch dimensions: ``contact`` and
    ``force_body`` are (..., 2), ``products`` is (..., n). ``init`` warm
    starts Newton's method. With ``jacobian=True`` also returns
    d(twist)/d(products) of shape (..., 3, n), obtained from the implicit
    function theorem at the solution.
    """
    g = friction.gravity
    offsets = obj.offsets
    wa = applied_wrench(contact, force_body)
    products = np.asarray(products, dtype=float)
    n = offsets.shape[0]
    if products.shape[-1] != n:
        raise ValueError(f"expected {n} per-cell products, got {products.shape[-1]}")
    if np.any(products < 0) or np.any(products.sum(-1) <= 0):
        raise ValueError("mass-friction products must be non-negative with a positive sum")
    shape = np.broadcast_shapes(wa.shape[:-1], products.shape[:-1])
    nb = int(np.prod(shape, dtype=int))
    wa_b = np.ascontiguousarray(np.broadcast_to(wa, shape + (3,)).reshape(nb, 3))
    wgt = np.ascontiguousarray(g * np.broadcast_to(products, shape + (n,)).reshape(nb, n))
    if init is None:
        init_b = np.zeros((nb, 3))
    else:
        init_b = np.ascontiguousarray(np.broadcast_to(init, shape + (3,)).reshape(nb, 3), dtype=float)
    twist = np.empty((nb, 3))
    jac = np.empty((nb, 3, n)) if jacobian else np.empty((1, 3, 1))
    _solve_kernel(np.ascontiguousarray(offsets[:, 0]), np.ascontiguousarray(offsets[:, 1]),
                  wa_b, wgt, init_b, friction.regularization_speed, friction.viscous_ratio,
                  obj.cell_width ** 2 / 6.0, friction.static_ratio * 1.0, max_iter, jacobian, twist, jac)
    twist = twist.reshape(shape + (3,))
    if not jacobian:
        return twist
    # the kernel differentiates w.r.t. g * p_i
    return twist, g * jac.reshape(shape + (3, n))


# --- SE(2) exponential update ----------------------------------------------

def _vmat_coeffs(phi):
    """a = sin(phi)/phi, b = (1 - cos phi)/phi and their derivatives."""
    phi = np.asarray(phi, dtype=float)
    small = np.abs(phi) < 1e-3
    ps = np.where(small, 1.0, phi)
    p2 = phi * phi
    a = np.where(small, 1 - p2 / 6 + p2 * p2 / 120, np.sin(ps) / ps)
    b = np.where(small, phi / 2 - phi * p2 / 24 + phi * p2 * p2 / 720,
                 2 * np.sin(ps / 2) ** 2 / ps)
    da = np.where(small, -phi / 3 + phi * p2 / 30,
                  (ps * np.cos(ps) - np.sin(ps)) / (ps * ps))
    db = np.where(small, 0.5 - p2 / 8 + p2 * p2 / 144,
                  (ps * np.sin(ps) - 2 * np.sin(ps / 2) ** 2) / (ps * ps))
    return a, b, da, db


def integrate_pose(pose, twist, duration, jacobian: bool = False):
    """Pose after moving with constant body twist for ``duration``.

    pose (..., 3), twist (..., 3). The Jacobian is d(new pose)/d(twist),
    shape (..., 3, 3).
    """
    pose = np.asarray(pose, dtype=float)
    twist = np.asarray(twist, dtype=float)
    th = pose[..., 2]
    phi = twist[..., 2] * duration
    a, b, da, db = _vmat_coeffs(phi)
    vx, vy = twist[..., 0] * duration, twist[..., 1] * duration
    lx = a * vx - b * vy
    ly = b * vx + a * vy
    c, s = np.cos(th), np.sin(th)
    new = np.stack([pose[..., 0] + c * lx - s * ly,
                    pose[..., 1] + s * lx + c * ly,
                    th + phi], axis=-1)
    if not jacobian:
        return new
    jac = np.zeros(np.broadcast_shapes(pose.shape, twist.shape)[:-1] + (3, 3))
    # d(l)/d(vx, vy) = duration * [[a, -b], [b, a]]; d(l)/d(omega) via phi
    dur = np.asarray(duration, dtype=float)
    dl_dw = np.stack([da * vx - db * vy, db * vx + da * vy], axis=-1) * dur[..., None]
    jac[..., 0, 0] = duration * (c * a - s * b)
    jac[..., 0, 1] = duration * (-c * b - s * a)
    jac[..., 1, 0] = duration * (s * a + c * b)
    jac[..., 1, 1] = duration * (-s * b + c * a)
    jac[..., 0, 2] = c * dl_dw[..., 0] - s * dl_dw[..., 1]
    jac[..., 1, 2] = s * dl_dw[..., 0] + c * dl_dw[..., 1]
    jac[..., 2, 2] = duration
    return new, jac


# --- single-object API ------------------------------------------------------

def action_in_body(obj: GridObject, body: BodyState, action: PushAction):
    """Contact point and force of ``action`` expressed in the body frame."""
    contact = obj.offsets[action.contact_cell]
    force_b = rotation(body.rotation).T @ action.force
    return contact, force_b


def _check_inputs(obj, body, action, params):
    if params.n != obj.n:
        raise ValueError(f"params have {params.n} cells, object has {obj.n}")
    if not (np.all(np.isfinite(body.pose)) and np.all(np.isfinite(action.force))):
        raise ValueError("non-finite state or force")


def body_twist(obj: GridObject, body: BodyState, action: PushAction, params: ParamMap,
               friction: FrictionModel) -> np.ndarray:
    _check_inputs(obj, body, action, params)
    contact, force_b = action_in_body(obj, body, action)
    return solve_twist(obj, contact, force_b, params.products, friction)


def predict_velocity(obj: GridObject, body: BodyState, action: PushAction, params: ParamMap,
                     cfg: WorldConfig):
    """World-frame (linear velocity, angular velocity) at the end of the push."""
    twist = body_twist(obj, body, action, params, cfg.friction)
    end_theta = body.rotation + twist[2] * action.duration
    return rotation(end_theta) @ twist[:2], float(twist[2])


def step(obj: GridObject, body: BodyState, action: PushAction, params: ParamMap,
         cfg: WorldConfig) -> BodyState:
    """Apply one push and return the resulting state."""
    twist = body_twist(obj, body, action, params, cfg.friction)
    return _advance(body, twist, action.duration)


def _advance(body: BodyState, twist: np.ndarray, duration: float) -> BodyState:
    new = integrate_pose(body.pose, twist, duration)
    lin = rotation(new[2]) @ twist[:2]
    return BodyState(new[:2], new[2], lin, twist[2])


def perturb_action(action: PushAction, cfg: WorldConfig, rng: np.random.Generator) -> PushAction:
    """Apply control noise: relative magnitude scaling and direction rotation."""
    if cfg.force_noise_sigma == 0 and cfg.angle_noise_sigma == 0:
        return action
    scale = 1.0 + rng.normal(0.0, cfg.force_noise_sigma)
    angle = rng.normal(0.0, cfg.angle_noise_sigma)
    force = max(scale, 0.0) * (rotation(angle) @ action.force)
    return PushAction(action.contact_cell, force, action.duration)


class World:
    """Ground-truth stand-in holding hidden parameters and a private rng."""

    def __init__(self, obj: GridObject, hidden: ParamMap, cfg: WorldConfig, seed=0,
                 table=None):
        if hidden.n != obj.n:
            raise ValueError("hidden params do not match the object")
        self.obj = obj
        self.hidden = hidden
        self.cfg = cfg
        self.table = table
        self.rng = np.random.default_rng(seed)

    def execute(self, body: BodyState, action: PushAction) -> BodyState:
        executed = perturb_action(action, self.cfg, self.rng)
        return step(self.obj, body, executed, self.hidden, self.cfg)

    def fell(self, body: BodyState) -> bool:
        if self.table is None:
            return False
        return not balance_check(self.obj, body, self.hidden, self.table)


def world_rollout(obj: GridObject, body0: BodyState, actions, hidden: ParamMap,
                  cfg: WorldConfig, rng_seed=0) -> Trajectory:
    """Execute ``actions`` in the noisy ground-truth world and record the result.

    Recorded velocities are finite differences of consecutive poses; the
    recorded actions are the commanded (noise-free) ones.
    """
    world = World(obj, hidden, cfg, rng_seed)
    bodies = [body0.at_rest()]
    for act in actions:
        nxt = world.execute(bodies[-1], act)
        bodies.append(nxt.at_rest())
    return Trajectory.from_bodies(obj, bodies, actions, cfg.dt)


# --- tables and balance -----------------------------------------------------

@dataclass(frozen=True)
class Table:
    """Disc-shaped support surface centered at ``center``."""

    radius: float = 0.5
    center: tuple = (0.0, 0.0)
    shape: str = "disc"

    def __post_init__(self):
        if self.shape != "disc":
            raise ValueError(f"unsupported table shape {self.shape!r}")
        if not self.radius > 0:
            raise ValueError("table radius must be positive")

    def signed_distance(self, points) -> np.ndarray:
        """Distance inside the edge (positive on the table)."""
        pts = np.asarray(points, dtype=float) - np.asarray(self.center)
        return self.radius - np.linalg.norm(pts, axis=-1)


def center_of_mass(obj: GridObject, pose, masses) -> np.ndarray:
    """Mass-weighted cell centroid in world frame; masses (..., n) -> (..., 2)."""
    pos = cell_positions(obj, pose)
    m = np.asarray(masses, dtype=float)
    return (m[..., None] * pos).sum(-2) / m.sum(-1)[..., None]


def balance_check(obj: GridObject, body: BodyState, params: ParamMap, table: Table,
                  margin: float = 0.0) -> bool:
    """True iff the center of mass lies on the table shrunk by ``margin``."""
    com = center_of_mass(obj, body.pose, params.mass)
    return bool(table.signed_distance(com) >= margin)


def footprint_clearance(obj: GridObject, pose, table: Table) -> np.ndarray:
    """Minimum signed distance of any cell corner to the table edge."""
    pose = np.asarray(pose, dtype=float)
    corners = obj.corners
    c, s = np.cos(pose[..., 2]), np.sin(pose[..., 2])
    x = pose[..., None, 0] + c[..., None] * corners[:, 0] - s[..., None] * corners[:, 1]
    y = pose[..., None, 1] + s[..., None] * corners[:, 0] + c[..., None] * corners[:, 1]
    return table.signed_distance(np.stack([x, y], axis=-1)).min(axis=-1)


def overhang(obj: GridObject, pose, table: Table) -> np.ndarray:
    """How far the footprint protrudes past the table edge (m, >= 0 means off)."""
    return -footprint_clearance(obj, pose, table)
