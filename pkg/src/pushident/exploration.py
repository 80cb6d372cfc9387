"""Choosing the next exploratory push from a random candidate set."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import FrictionModel, line_breakaway, solve_twist
from .geometry import BodyState, GridObject, PushAction, rotation

MODES = ("random", "mostDifferent", "mostDistinctive")


@dataclass(frozen=True)
class ExploreConfig:
    """Candidate sampling settings.

    Force magnitudes are drawn as fractions of the estimated breakaway
    force of each push; ``first_force_range`` is used for the initial
    blind push.
    """

    n_candidates: int = 32
    force_range: tuple = (0.2, 1.0)
    first_force_range: tuple = (0.2, 0.6)
    jitter: float = math.radians(15.0)

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ValueError("need at least one candidate")
        for lo, hi in (self.force_range, self.first_force_range):
            if not 0 < lo <= hi:
                raise ValueError("force ranges must satisfy 0 < lo <= hi")


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple

    def __post_init__(self):
        if len(self.candidates) == 0:
            raise ValueError("empty candidate set")

    def __len__(self):
        return len(self.candidates)

    def __getitem__(self, i):
        return self.candidates[i]

    def __iter__(self):
        return iter(self.candidates)


def sample_candidates(obj: GridObject, body: BodyState, products, rng: np.random.Generator,
                      cfg: ExploreConfig = None, duration: float = 1.0, force_range=None,
                      gravity: float = 9.8) -> CandidateSet:
    """Random pushes on contour cells, roughly along the inward normal.

    Magnitudes are fractions of each push's own breakaway force under the
    per-cell mass-friction ``products`` (the current best guess), so pushes
    far from the friction center, which pivot the object easily, are
    gentler than pushes through it.
    """
    cfg = cfg or ExploreConfig()
    lo, hi = force_range or cfg.force_range
    idx = rng.integers(len(obj.contour), size=cfg.n_candidates)
    jitter = rng.uniform(-cfg.jitter, cfg.jitter, size=cfg.n_candidates)
    frac = rng.uniform(lo, hi, size=cfg.n_candidates)
    dirs_b = np.array([rotation(j) @ (-np.asarray(obj.contour[k][1], dtype=float))
                       for k, j in zip(idx, jitter)])
    contacts = obj.offsets[[obj.contour[k][0] for k in idx]]
    mags = frac * line_breakaway(obj, contacts, dirs_b, products, gravity)
    R = rotation(body.rotation)
    out = [PushAction(obj.contour[k][0], f * (R @ d), duration)
           for k, d, f in zip(idx, dirs_b, mags)]
    return CandidateSet(tuple(out))


def min_history_distance(candidates, history, n: int) -> np.ndarray:
    """Per candidate, the smallest distance to any executed push (3n force vectors)."""
    cand = np.array([c.generalized(n) for c in candidates])
    if not history:
        return np.full(len(cand), np.inf)
    hist = np.array([h.generalized(n) for h in history])
    d = np.linalg.norm(cand[:, None, :] - hist[None, :, :], axis=-1)
    return d.min(axis=1)


def cell_velocities(obj: GridObject, body: BodyState, candidates, products,
                    friction: FrictionModel) -> np.ndarray:
    """Per-cell velocity vectors (C, K, 3n) of each candidate under each model.

    Vectors are in the body frame; pairwise distances are unaffected by
    the rotation to world frame.
    """
    R_T = rotation(body.rotation).T
    contacts = np.array([obj.offsets[c.contact_cell] for c in candidates])
    forces = np.array([R_T @ c.force for c in candidates])
    products = np.atleast_2d(products)
    tw = solve_twist(obj, contacts[:, None], forces[:, None], products[None],
                     friction)  # (C, K, 3)
    r = obj.offsets
    vx = tw[..., 0:1] - tw[..., 2:3] * r[:, 1]
    vy = tw[..., 1:2] + tw[..., 2:3] * r[:, 0]
    w = np.broadcast_to(tw[..., 2:3], vx.shape)
    return np.stack([vx, vy, w], axis=-1).reshape(tw.shape[:2] + (3 * obj.n,))


def disagreement(obj: GridObject, body: BodyState, candidates, products,
                 friction: FrictionModel) -> np.ndarray:
    """Sum over unordered model pairs of the velocity-vector distance, per candidate."""
    V = cell_velocities(obj, body, candidates, products, friction)
    K = V.shape[1]
    iu, ju = np.triu_indices(K, k=1)
    return np.linalg.norm(V[:, iu] - V[:, ju], axis=-1).sum(axis=1)


def select_action(mode: str, candidates, history, ensemble, obj: GridObject,
                  body: BodyState, friction: FrictionModel,
                  rng: np.random.Generator = None) -> PushAction:
    """Pick one candidate; argmax ties resolve to the lowest index."""
    candidates = tuple(candidates)
    if not candidates:
        raise ValueError("empty candidate set")
    if mode == "random":
        rng = rng if rng is not None else np.random.default_rng()
        return candidates[int(rng.integers(len(candidates)))]
    if mode == "mostDifferent":
        score = min_history_distance(candidates, list(history), obj.n)
    elif mode == "mostDistinctive":
        if ensemble is None:
            raise ValueError("mostDistinctive needs a model ensemble")
        score = disagreement(obj, body, candidates, ensemble.products, friction)
    else:
        raise ValueError(f"unknown exploration mode {mode!r}; choose from {MODES}")
    return candidates[int(np.argmax(score))]
