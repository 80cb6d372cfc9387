"""JSON/CSV formats for scenes, ensembles, trajectories and trial reports.

Every writer emits canonical JSON (sorted keys, two-space indent, shortest
round-trip float repr), so read -> write reproduces a canonical file byte
for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import Table, WorldConfig
from .geometry import BodyState, GridObject, ParamMap, PushAction, Trajectory, decompose_footprint
from .identification import ModelEnsemble


class FormatError(ValueError):
    """Malformed input file; the message names the file and, for JSON syntax errors, the line."""


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _floats(a) -> list:
    return [float(x) for x in np.asarray(a, dtype=float).reshape(-1)]


def read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# --- scenes -------------------------------------------------------------------

@dataclass(frozen=True)
class Scene:
    """Object footprint, table, hidden parameters and noise levels.

    ``footprint`` holds bitmap rows as strings, top row first, ``#`` for a
    filled pixel and ``.`` for empty. ``hidden`` is only handed to the
    ground-truth world.
    """

    name: str
    cell_width: float
    footprint: tuple
    table: Table
    hidden: ParamMap
    noise: WorldConfig
    pixel_size: float | None = None
    start: tuple = (0.0, 0.0, 0.0)
    obj: GridObject = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.obj is None:
            object.__setattr__(self, "obj", decompose_footprint(
                footprint_array(self.footprint), self.cell_width, self.pixel_size))
        if self.hidden.n != self.obj.n:
            raise ValueError(f"hidden parameters cover {self.hidden.n} cells, "
                             f"footprint has {self.obj.n}")

    @property
    def start_body(self) -> BodyState:
        return BodyState.from_pose(np.asarray(self.start, dtype=float))


def footprint_array(rows) -> np.ndarray:
    rows = list(rows)
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("footprint rows must be non-empty and equally long")
    bad = set("".join(rows)) - set("#.")
    if bad:
        raise ValueError(f"footprint rows may only contain '#' and '.', found {sorted(bad)}")
    return np.array([[ch == "#" for ch in r] for r in rows], dtype=bool)


def _grid_to_cells(obj: GridObject, grid, height: int, name: str) -> np.ndarray:
    out = np.empty(obj.n)
    for i, (c, r) in enumerate(obj.cells):
        try:
            v = grid[height - 1 - r][c]
        except (IndexError, TypeError) as exc:
            raise ValueError(f"hidden {name} grid does not match the footprint") from exc
        if v is None:
            raise ValueError(f"hidden {name} missing for occupied cell at column {c}, row {r}")
        out[i] = float(v)
    return out


def _cells_to_grid(obj: GridObject, values, height: int, width: int) -> list:
    grid = [[None] * width for _ in range(height)]
    for v, (c, r) in zip(values, obj.cells):
        grid[height - 1 - r][c] = float(v)
    return grid


def scene_from_dict(d: dict, name: str = "scene") -> Scene:
    try:
        rows = tuple(d["footprint"])
        cell_width = float(d["cell_width"])
        pixel_size = d.get("pixel_size")
        pixel_size = None if pixel_size is None else float(pixel_size)
        tab = d.get("table", {})
        table = Table(float(tab.get("radius", 0.5)), tuple(_floats(tab.get("center", (0.0, 0.0)))),
                      tab.get("shape", "disc"))
        noise = d.get("noise", {})
        world = WorldConfig(force_noise_sigma=float(noise.get("force_sigma", 0.0)),
                            angle_noise_sigma=float(noise.get("angle_sigma", 0.0)))
        obj = decompose_footprint(footprint_array(rows), cell_width, pixel_size)
        hidden = d["hidden"]
        per_pixel = pixel_size is None or math.isclose(pixel_size, cell_width)
        if per_pixel and hidden["mass"] and isinstance(hidden["mass"][0], list):
            mass = _grid_to_cells(obj, hidden["mass"], len(rows), "mass")
            fric = _grid_to_cells(obj, hidden["friction"], len(rows), "friction")
        else:
            mass, fric = np.asarray(hidden["mass"], float), np.asarray(hidden["friction"], float)
        start = tuple(_floats(d.get("start", (0.0, 0.0, 0.0))))
        if len(start) != 3:
            raise ValueError("start must be [x, y, theta]")
        return Scene(str(d.get("name", name)), cell_width, rows, table, ParamMap(mass, fric),
                     world, pixel_size, start, obj)
    except KeyError as exc:
        raise FormatError(f"{name}: missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{name}: {exc}") from exc


def scene_to_dict(scene: Scene) -> dict:
    obj = scene.obj
    height, width = len(scene.footprint), len(scene.footprint[0])
    if scene.pixel_size is None or math.isclose(scene.pixel_size, scene.cell_width):
        mass = _cells_to_grid(obj, scene.hidden.mass, height, width)
        fric = _cells_to_grid(obj, scene.hidden.friction, height, width)
    else:
        mass, fric = _floats(scene.hidden.mass), _floats(scene.hidden.friction)
    d = {
        "name": scene.name,
        "cell_width": scene.cell_width,
        "footprint": list(scene.footprint),
        "table": {"shape": scene.table.shape, "radius": scene.table.radius,
                  "center": _floats(scene.table.center)},
        "hidden": {"mass": mass, "friction": fric},
        "noise": {"force_sigma": scene.noise.force_noise_sigma,
                  "angle_sigma": scene.noise.angle_noise_sigma},
        "start": _floats(scene.start),
    }
    if scene.pixel_size is not None:
        d["pixel_size"] = scene.pixel_size
    return d


def load_scene(path) -> Scene:
    path = Path(path)
    return scene_from_dict(read_json(path), path.stem)


def save_scene(scene: Scene, path) -> None:
    write_text(path, dumps(scene_to_dict(scene)))


# --- ensembles ----------------------------------------------------------------

def ensemble_to_dict(ens: ModelEnsemble) -> dict:
    bounds = [[float(f), float(m)] for f, m in np.asarray(ens.bounds)]
    return {
        "K": ens.K,
        "bounds": [None if any(math.isnan(v) for v in b) else b for b in bounds],
        "models": [{"mass": _floats(m.mass), "friction": _floats(m.friction),
                    "loss": float(l), "probability": float(p)}
                   for m, l, p in zip(ens.models, ens.losses, ens.probabilities)],
    }


def ensemble_from_dict(d: dict, name: str = "ensemble") -> ModelEnsemble:
    try:
        models = d["models"]
        if len(models) != int(d["K"]):
            raise ValueError(f"K = {d['K']} but {len(models)} models listed")
        params = [ParamMap(m["mass"], m["friction"]) for m in models]
        losses = [float(m["loss"]) for m in models]
        probs = np.array([float(m["probability"]) for m in models])
        raw = d.get("bounds") or [None] * len(models)
        bounds = np.array([[np.nan, np.nan] if b is None else b for b in raw], dtype=float)
        return ModelEnsemble(tuple(params), losses, probs, bounds)
    except KeyError as exc:
        raise FormatError(f"{name}: missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{name}: {exc}") from exc


def load_ensemble(path) -> ModelEnsemble:
    path = Path(path)
    return ensemble_from_dict(read_json(path), str(path))


def save_ensemble(ens: ModelEnsemble, path) -> None:
    write_text(path, dumps(ensemble_to_dict(ens)))


# --- trajectories ---------------------------------------------------------------

def action_to_dict(a: PushAction) -> dict:
    return {"cell": a.contact_cell, "fx": float(a.force[0]), "fy": float(a.force[1]),
            "duration": float(a.duration)}


def action_from_dict(d: dict) -> PushAction:
    return PushAction(int(d["cell"]), (float(d["fx"]), float(d["fy"])),
                      float(d.get("duration", 1.0)))


def trajectory_to_dict(traj: Trajectory) -> dict:
    records = []
    for t, body in enumerate(traj.bodies):
        rec = {"t": t, "body_pose": _floats(body.pose), "cell_vector": _floats(traj.cells[t]),
               "dt": traj.dt}
        rec["action"] = action_to_dict(traj.actions[t]) if t < traj.T else None
        records.append(rec)
    return {"records": records}


def trajectory_from_dict(d: dict, obj: GridObject, name: str = "trajectory") -> Trajectory:
    try:
        recs = sorted(d["records"], key=lambda r: int(r["t"]))
        bodies = [BodyState.from_pose(r["body_pose"]) for r in recs]
        actions = [action_from_dict(r["action"]) for r in recs[:-1]]
        dt = float(recs[0]["dt"])
        traj = Trajectory.from_bodies(obj, bodies, actions, dt)
    except KeyError as exc:
        raise FormatError(f"{name}: missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"{name}: {exc}") from exc
    return traj


# --- reports and CSV ---------------------------------------------------------------

def csv_text(rows: list, columns: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _csv_value(row.get(k)) for k in columns})
    return buf.getvalue()


def _csv_value(v):
    if isinstance(v, bool) or v is None:
        return "" if v is None else int(v)
    if isinstance(v, float):
        return repr(v)
    return v
