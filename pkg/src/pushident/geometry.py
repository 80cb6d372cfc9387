"""Grid-decomposed planar objects, rigid states, actions and trajectories.

An object is a 4-connected set of square cells of width ``w``. Its body
frame is centered on the geometric centroid of the cell centers, so the
rest offsets of the cells sum to zero. The per-cell state vector
``[p1x, p1y, th1, ..., pnx, pny, thn]`` is always derived from a single
rigid pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import EmptyObject

# unit normals toward the four 4-neighbors, in grid (col, row) order
_NEIGHBORS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]. Works on scalars and arrays."""
    wrapped = np.remainder(np.asarray(theta, dtype=float) + np.pi, 2 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridObject:
    """Rigid planar object made of ``n`` square cells.

    ``cells`` holds integer grid coordinates ``(col, row)``; cell ``i``
    has its center at ``(col + 0.5, row + 0.5) * cell_width`` in the
    footprint frame. ``contour`` lists ``(cell_index, outward_normal)``
    pairs, one per free exterior side, so corner cells appear twice.
    """

    cell_width: float
    cells: tuple
    contour: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cells = tuple((int(c), int(r)) for c, r in self.cells)
        if not cells:
            raise EmptyObject("object has no cells")
        if len(set(cells)) != len(cells):
            raise ValueError("duplicate cell coordinates")
        if not self.cell_width > 0:
            raise ValueError("cell_width must be positive")
        object.__setattr__(self, "cells", cells)
        if len(_components(cells)) != 1:
            raise ValueError("cells are not 4-connected")
        object.__setattr__(self, "contour", _exterior_contour(cells))

    @property
    def n(self) -> int:
        return len(self.cells)

    @property
    def contour_cells(self) -> tuple:
        return tuple(sorted({i for i, _ in self.contour}))

    @property
    def centers(self) -> np.ndarray:
        """Cell centers in the footprint frame, shape (n, 2)."""
        return (np.array(self.cells, dtype=float) + 0.5) * self.cell_width

    @property
    def centroid(self) -> np.ndarray:
        return self.centers.mean(axis=0)

    @property
    def offsets(self) -> np.ndarray:
        """Cell centers relative to the body origin (the geometric centroid)."""
        c = self.centers
        return c - c.mean(axis=0)

    @property
    def corners(self) -> np.ndarray:
        """All cell corners relative to the body origin, shape (4n, 2)."""
        h = 0.5 * self.cell_width
        d = np.array([[-h, -h], [h, -h], [h, h], [-h, h]])
        return (self.offsets[:, None, :] + d[None]).reshape(-1, 2)

    @property
    def circumradius(self) -> float:
        return float(np.linalg.norm(self.corners, axis=1).max())

    def normals_of(self, index: int) -> list:
        return [nrm for i, nrm in self.contour if i == index]

    def contour_neighbors(self, index: int) -> list:
        """Contour cells touching ``index`` (8-neighborhood), excluding itself."""
        c0, r0 = self.cells[index]
        out = []
        for j in self.contour_cells:
            c, r = self.cells[j]
            if j != index and max(abs(c - c0), abs(r - r0)) == 1:
                out.append(j)
        return out

    def bitmap(self) -> np.ndarray:
        """Occupancy bitmap at cell resolution, first row is the top."""
        cells = np.array(self.cells)
        cmin, rmin = cells.min(axis=0)
        width = cells[:, 0].max() - cmin + 1
        height = cells[:, 1].max() - rmin + 1
        grid = np.zeros((height, width), dtype=bool)
        grid[height - 1 - (cells[:, 1] - rmin), cells[:, 0] - cmin] = True
        return grid


def _components(cells) -> list:
    cellset = set(cells)
    seen, comps = set(), []
    for start in cells:
        if start in seen:
            continue
        comp, stack = [], [start]
        seen.add(start)
        while stack:
            c, r = stack.pop()
            comp.append((c, r))
            for dc, dr in _NEIGHBORS:
                nb = (c + dc, r + dr)
                if nb in cellset and nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        comps.append(comp)
    return comps


def _exterior_contour(cells) -> tuple:
    cellset = set(cells)
    arr = np.array(cells)
    cmin, rmin = arr.min(axis=0) - 1
    cmax, rmax = arr.max(axis=0) + 1
    # flood fill free space from the padded border; holes stay unreached
    exterior = set()
    stack = [(int(cmin), int(rmin))]
    exterior.add(stack[0])
    while stack:
        c, r = stack.pop()
        for dc, dr in _NEIGHBORS:
            nb = (c + dc, r + dr)
            if (cmin <= nb[0] <= cmax and rmin <= nb[1] <= rmax
                    and nb not in cellset and nb not in exterior):
                exterior.add(nb)
                stack.append(nb)
    contour = []
    for i, (c, r) in enumerate(cells):
        for dc, dr in _NEIGHBORS:
            if (c + dc, r + dr) in exterior:
                contour.append((i, (float(dc), float(dr))))
    return tuple(contour)


def _overlap(edges_a: np.ndarray, edges_b: np.ndarray) -> np.ndarray:
    """Length of overlap between consecutive intervals of two 1-D partitions."""
    lo = np.maximum(edges_a[:-1, None], edges_b[None, :-1])
    hi = np.minimum(edges_a[1:, None], edges_b[None, 1:])
    return np.clip(hi - lo, 0.0, None)


def decompose_footprint(footprint, cell_width: float, pixel_size: float | None = None,
                        threshold: float = 0.5) -> GridObject:
    """Rasterize a footprint into a :class:`GridObject`.

    ``footprint`` is either a 2-D occupancy bitmap (first row on top, each
    pixel ``pixel_size`` wide, defaulting to ``cell_width``) or a polygon
    given as an (m, 2) vertex array in meters. A grid cell is kept when at
    least ``threshold`` of its area is covered; only the largest
    4-connected component survives.
    """
    if cell_width <= 0:
        raise ValueError("cell_width must be positive")
    fp = np.asarray(footprint)
    if fp.ndim == 2 and fp.shape[1] == 2 and fp.dtype.kind == "f" and pixel_size is None:
        coverage, origin = _polygon_coverage(fp, cell_width)
    else:
        coverage = _bitmap_coverage(fp.astype(bool), cell_width, pixel_size or cell_width)
        origin = (0, 0)
    # coverage is indexed [col, row]
    keep = coverage >= threshold - 1e-12
    if not keep.any():
        raise EmptyObject("no cell reaches the coverage threshold")
    labels, count = ndimage.label(keep)
    sizes = ndimage.sum(keep, labels, index=np.arange(1, count + 1))
    best = int(np.argmax(sizes)) + 1
    cols, rows = np.nonzero(labels == best)
    order = np.lexsort((cols, rows))
    cells = [(int(cols[k]) + origin[0], int(rows[k]) + origin[1]) for k in order]
    return GridObject(cell_width, tuple(cells))


def _bitmap_coverage(bitmap: np.ndarray, w: float, s: float) -> np.ndarray:
    if bitmap.ndim != 2 or not bitmap.any():
        raise EmptyObject("footprint bitmap is empty")
    h, width = bitmap.shape
    occ = bitmap[::-1].T.astype(float)  # [col, row] with row 0 at the bottom
    px = np.arange(width + 1) * s
    py = np.arange(h + 1) * s
    ncol = int(math.ceil(width * s / w - 1e-9))
    nrow = int(math.ceil(h * s / w - 1e-9))
    cx = np.arange(ncol + 1) * w
    cy = np.arange(nrow + 1) * w
    ox = _overlap(cx, px)  # (ncol, width)
    oy = _overlap(cy, py)  # (nrow, h)
    return ox @ occ @ oy.T / (w * w)


def _polygon_coverage(vertices: np.ndarray, w: float):
    from shapely.geometry import Polygon, box

    poly = Polygon(vertices)
    if poly.is_empty or poly.area <= 0:
        raise EmptyObject("footprint polygon has no area")
    xmin, ymin, xmax, ymax = poly.bounds
    c0, r0 = int(math.floor(xmin / w)), int(math.floor(ymin / w))
    c1, r1 = int(math.ceil(xmax / w)), int(math.ceil(ymax / w))
    cov = np.zeros((c1 - c0, r1 - r0))
    for i in range(c1 - c0):
        for j in range(r1 - r0):
            x, y = (c0 + i) * w, (r0 + j) * w
            cov[i, j] = poly.intersection(box(x, y, x + w, y + w)).area / (w * w)
    return cov, (c0, r0)


class _ValueEquality:
    """Field-wise equality and hashing for frozen dataclasses holding numpy arrays."""

    def _key(self):
        return tuple(np.asarray(getattr(self, f.name)).tobytes() if isinstance(
            getattr(self, f.name), np.ndarray) else getattr(self, f.name) for f in fields(self))

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())


@dataclass(frozen=True, eq=False)
class BodyState(_ValueEquality):
    """Rigid pose of the body origin plus its world-frame velocity."""

    position: np.ndarray
    rotation: float = 0.0
    lin_velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    ang_velocity: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position).reshape(2))
        object.__setattr__(self, "lin_velocity", _frozen(self.lin_velocity).reshape(2))
        object.__setattr__(self, "rotation", wrap_angle(float(self.rotation)))
        object.__setattr__(self, "ang_velocity", float(self.ang_velocity))
        values = np.r_[self.position, self.rotation, self.lin_velocity, self.ang_velocity]
        if not np.all(np.isfinite(values)):
            raise ValueError("BodyState has non-finite components")

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.position[0], self.position[1], self.rotation])

    @classmethod
    def from_pose(cls, pose, velocity=None) -> "BodyState":
        if velocity is None:
            velocity = (0.0, 0.0, 0.0)
        return cls(np.asarray(pose[:2]), pose[2], np.asarray(velocity[:2]), velocity[2])

    def at_rest(self) -> "BodyState":
        return BodyState(self.position, self.rotation)


@dataclass(frozen=True, eq=False)
class ParamMap(_ValueEquality):
    """Per-cell masses (kg) and Coulomb friction coefficients."""

    mass: np.ndarray
    friction: np.ndarray

    def __post_init__(self):
        m = _frozen(self.mass).reshape(-1)
        mu = _frozen(self.friction).reshape(-1)
        if m.shape != mu.shape:
            raise ValueError("mass and friction must have the same length")
        if np.any(m <= 0) or np.any(mu < 0) or not np.all(np.isfinite(np.r_[m, mu])):
            raise ValueError("masses must be positive and friction non-negative")
        object.__setattr__(self, "mass", m)
        object.__setattr__(self, "friction", mu)

    @property
    def n(self) -> int:
        return self.mass.size

    @property
    def products(self) -> np.ndarray:
        return self.mass * self.friction

    def inertia(self, cell_width: float) -> np.ndarray:
        """Per-cell moment of inertia of a cuboid cell about its own center."""
        return self.mass * cell_width ** 2 / 6.0

    @classmethod
    def uniform(cls, n: int, mass: float, friction: float) -> "ParamMap":
        return cls(np.full(n, mass), np.full(n, friction))


@dataclass(frozen=True, eq=False)
class PushAction(_ValueEquality):
    """One fingertip push: contact cell, world-frame force at push start, duration."""

    contact_cell: int
    force: np.ndarray
    duration: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "contact_cell", int(self.contact_cell))
        object.__setattr__(self, "force", _frozen(self.force).reshape(2))
        if not np.all(np.isfinite(self.force)):
            raise ValueError("push force must be finite")
        if not self.duration > 0:
            raise ValueError("push duration must be positive")

    @property
    def magnitude(self) -> float:
        return float(np.hypot(*self.force))

    def generalized(self, n: int) -> np.ndarray:
        """Sparse 3n generalized force, torque slots left at zero."""
        out = np.zeros(3 * n)
        out[3 * self.contact_cell: 3 * self.contact_cell + 2] = self.force
        return out

    def validate(self, obj: GridObject) -> None:
        if self.contact_cell not in obj.contour_cells:
            raise ValueError(f"cell {self.contact_cell} is not on the contour")


def expand_state(obj: GridObject, body: BodyState) -> np.ndarray:
    """Per-cell state vector ``[p1x, p1y, th1, ...]`` of a rigid pose."""
    pos = cell_positions(obj, body.pose)
    out = np.empty((obj.n, 3))
    out[:, :2] = pos
    out[:, 2] = body.rotation
    return out.reshape(-1)


def cell_positions(obj: GridObject, pose) -> np.ndarray:
    """World positions of the cell centers, shape (..., n, 2) for poses (..., 3)."""
    pose = np.asarray(pose, dtype=float)
    c, s = np.cos(pose[..., 2]), np.sin(pose[..., 2])
    r = obj.offsets
    x = pose[..., None, 0] + c[..., None] * r[:, 0] - s[..., None] * r[:, 1]
    y = pose[..., None, 1] + s[..., None] * r[:, 0] + c[..., None] * r[:, 1]
    return np.stack([x, y], axis=-1)


def fit_body(obj: GridObject, x: np.ndarray) -> BodyState:
    """Recover the rigid pose from a consistent cell state vector."""
    x = np.asarray(x, dtype=float).reshape(obj.n, 3)
    theta = float(np.arctan2(np.sin(x[:, 2]).mean(), np.cos(x[:, 2]).mean()))
    return BodyState(x[:, :2].mean(axis=0), theta)


def state_difference(x_a: np.ndarray, x_b: np.ndarray) -> np.ndarray:
    """``x_a - x_b`` with the angle entries wrapped into (-pi, pi]."""
    x_a = np.asarray(x_a, dtype=float)
    x_b = np.asarray(x_b, dtype=float)
    if x_a.shape[-1] != x_b.shape[-1] or x_a.shape[-1] % 3:
        raise ValueError(f"state vectors have mismatched lengths {x_a.shape} / {x_b.shape}")
    d = x_a - x_b
    d[..., 2::3] = wrap_angle(d[..., 2::3])
    return d


def add_loss(x_a: np.ndarray, x_b: np.ndarray) -> float:
    """L2 norm of the difference of two 3n cell state vectors."""
    return float(np.linalg.norm(state_difference(x_a, x_b)))


def add_distance(obj: GridObject, pose_a, pose_b) -> float | np.ndarray:
    """Average distance between corresponding cell centers of two poses."""
    pa = cell_positions(obj, pose_a)
    pb = cell_positions(obj, pose_b)
    return np.linalg.norm(pa - pb, axis=-1).mean(axis=-1)


@dataclass(frozen=True)
class Trajectory:
    """Observed pushes: ``T`` actions between ``T + 1`` recorded states.

    ``bodies`` are the observed rigid poses, ``cells[t]`` the expanded
    state vectors and ``velocities[t]`` the finite-differenced per-cell
    velocities ``(x[t+1] - x[t]) / dt`` (zero at the terminal state).
    """

    dt: float
    bodies: tuple
    actions: tuple
    cells: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        if len(self.bodies) != len(self.actions) + 1:
            raise ValueError("a trajectory needs exactly one more state than actions")
        lengths = {np.asarray(c).size for c in self.cells}
        if len(lengths) != 1:
            raise ValueError("state vectors have different lengths")

    @property
    def T(self) -> int:
        return len(self.actions)

    @classmethod
    def from_bodies(cls, obj: GridObject, bodies: Sequence[BodyState],
                    actions: Sequence[PushAction], dt: float) -> "Trajectory":
        cells = np.array([expand_state(obj, b) for b in bodies])
        vel = np.zeros_like(cells)
        if len(bodies) > 1:
            vel[:-1] = state_difference(cells[1:], cells[:-1]) / dt
        cells.setflags(write=False)
        vel.setflags(write=False)
        return cls(float(dt), tuple(bodies), tuple(actions), cells, vel)

    def prefix(self, n_actions: int) -> "Trajectory":
        """Trajectory truncated to its first ``n_actions`` pushes."""
        cells = self.cells[: n_actions + 1].copy()
        vel = self.velocities[: n_actions + 1].copy()
        vel[-1] = 0.0
        return Trajectory(self.dt, self.bodies[: n_actions + 1], self.actions[:n_actions], cells, vel)
