"""Point-mass world with scripted velocity-field skills.

A composite skill is driven by the sum of its subskills' velocity fields, so
composition is exact. State is the 2-D position, the action the commanded
velocity, and the transition is an Euler step with Gaussian process noise.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import SimulationError, ValidationError
from .model import Trajectory
from .objectives import CompositionSpec

FORMAT_VERSION = 1
DATA_FILE = "trajectories.jsonl"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class PointMassConfig:
    dt: float = 0.05
    T: int = 50
    obs_noise_std: float = 0.01
    init_std: float = 0.1
    d_state: int = 2
    d_action: int = 2

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValidationError("dt must be positive")
        if int(self.T) < 1:
            raise ValidationError("T must be >= 1")
        if not self.obs_noise_std >= 0 or not self.init_std >= 0:
            raise ValidationError("noise levels must be nonnegative")
        if self.d_state != 2 or self.d_action != 2:
            raise ValidationError("the point-mass world is 2-D")

    def to_dict(self):
        return {"dt": self.dt, "T": self.T, "obs_noise_std": self.obs_noise_std,
                "init_std": self.init_std}


@dataclass(frozen=True)
class Constant:
    vx: float
    vy: float

    def __call__(self, t: float, s: np.ndarray) -> np.ndarray:
        return np.array([self.vx, self.vy], dtype=np.float64)

    def to_dict(self):
        return {"kind": "constant", "vx": self.vx, "vy": self.vy}


@dataclass(frozen=True)
class Sinusoid:
    axis: str
    amplitude: float
    frequency: float

    def __post_init__(self):
        if self.axis not in ("x", "y"):
            raise ValidationError(f"sinusoid axis must be 'x' or 'y', got {self.axis!r}")

    def __call__(self, t: float, s: np.ndarray) -> np.ndarray:
        out = np.zeros(2)
        out[0 if self.axis == "x" else 1] = self.amplitude * math.sin(2.0 * math.pi * self.frequency * t)
        return out

    def to_dict(self):
        return {"kind": "sinusoid", "axis": self.axis, "amplitude": self.amplitude,
                "frequency": self.frequency}


@dataclass(frozen=True)
class FieldSum:
    fields: tuple

    def __call__(self, t, s):
        return sum((f(t, s) for f in self.fields), np.zeros(2))


def field_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "constant":
        f = Constant(float(d["vx"]), float(d["vy"]))
        vals = (f.vx, f.vy)
    elif kind == "sinusoid":
        f = Sinusoid(str(d["axis"]), float(d["amplitude"]), float(d["frequency"]))
        vals = (f.amplitude, f.frequency)
    else:
        raise ValidationError(f"unknown velocity field kind {kind!r}")
    if not all(math.isfinite(v) for v in vals):
        raise ValidationError("velocity field parameters must be finite")
    return f


@dataclass(frozen=True)
class SubskillSpec:
    skill_id: str
    velocity_field: object

    def to_dict(self):
        return {"skill_id": self.skill_id, "velocity_field": self.velocity_field.to_dict()}


@dataclass
class DatasetManifest:
    subskills: list
    compositions: list
    demos_per_skill: int = 16
    seed: int = 0
    point_mass: PointMassConfig = field(default_factory=PointMassConfig)

    def __post_init__(self):
        ids = [s.skill_id for s in self.subskills]
        if not ids:
            raise ValidationError("manifest declares no subskills")
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate subskill ids")
        for comp in self.compositions:
            if comp.composite_id in ids:
                raise ValidationError(f"composite {comp.composite_id!r} reuses a subskill id")
            missing = [s for s in comp.subskill_ids if s not in ids]
            if missing:
                raise ValidationError(f"composition {comp.composite_id!r} references undeclared {missing}")
        if int(self.demos_per_skill) < 1:
            raise ValidationError("demos_per_skill must be >= 1")

    def field_for(self, skill_id: str):
        by_id = {s.skill_id: s.velocity_field for s in self.subskills}
        if skill_id in by_id:
            return by_id[skill_id]
        for comp in self.compositions:
            if comp.composite_id == skill_id:
                return FieldSum(tuple(by_id[s] for s in comp.subskill_ids))
        raise ValidationError(f"unknown skill {skill_id!r}")

    def skill_ids(self) -> list:
        return [s.skill_id for s in self.subskills] + [c.composite_id for c in self.compositions]

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "subskills": [s.to_dict() for s in self.subskills],
            "compositions": {c.composite_id: list(c.subskill_ids) for c in self.compositions},
            "demos_per_skill": int(self.demos_per_skill),
            "point_mass": self.point_mass.to_dict(),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            if d.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
                raise ValidationError(f"unsupported manifest format {d.get('format_version')}")
            subskills = [SubskillSpec(str(s["skill_id"]), field_from_dict(s["velocity_field"]))
                         for s in d["subskills"]]
            comps = [CompositionSpec(k, list(v)) for k, v in d.get("compositions", {}).items()]
            pm = PointMassConfig(**d.get("point_mass", {}))
            return cls(subskills, comps, int(d.get("demos_per_skill", 16)), int(d.get("seed", 0)), pm)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed manifest: {exc}") from exc


def default_manifest(preset: str = "diag_wiggle", seed: int = 0, demos_per_skill: int = 16) -> DatasetManifest:
    """Three subskills; ``diag_wiggle`` composes all three, ``diag`` the two constants."""
    subskills = [
        SubskillSpec("move_right", Constant(1.0, 0.0)),
        SubskillSpec("move_up", Constant(0.0, 1.0)),
        SubskillSpec("oscillate_x", Sinusoid("x", 1.0, 0.2)),
    ]
    presets = {
        "diag_wiggle": [CompositionSpec("diag_wiggle", ["move_right", "move_up", "oscillate_x"])],
        "diag": [CompositionSpec("diag", ["move_right", "move_up"])],
    }
    if preset not in presets:
        raise ValidationError(f"unknown preset {preset!r}; choose from {sorted(presets)}")
    return DatasetManifest(subskills, presets[preset], demos_per_skill, seed)


def simulate(config: PointMassConfig, controller: Callable, s_1, seed: int) -> Trajectory:
    rng = np.random.default_rng(seed)
    return _simulate(config, controller, np.asarray(s_1, dtype=np.float64), rng, "")


def _simulate(config, controller, s_1, rng, skill_id) -> Trajectory:
    T = int(config.T)
    states = np.empty((T, 2))
    actions = np.empty((T, 2))
    s = s_1.copy()
    for t in range(T):
        states[t] = s
        a = np.asarray(controller(t * config.dt, s), dtype=np.float64)
        if not np.isfinite(a).all():
            raise SimulationError(f"controller returned non-finite action at step {t}")
        actions[t] = a
        noise = rng.normal(0.0, config.obs_noise_std, size=2) if config.obs_noise_std > 0 else 0.0
        s = s + config.dt * a + noise
    return Trajectory(states, actions, skill_id)


@dataclass
class Dataset:
    trajectories: list
    manifest: DatasetManifest

    @property
    def compositions(self) -> list:
        return self.manifest.compositions

    def by_skill(self, skill_id: str) -> list:
        return [t for t in self.trajectories if t.skill_id == skill_id]

    def subskill_ids(self) -> list:
        return [s.skill_id for s in self.manifest.subskills]


def generate_dataset(manifest: DatasetManifest, config: PointMassConfig | None = None) -> Dataset:
    """``demos_per_skill`` demos for every subskill and composite, seeded per demo."""
    config = config or manifest.point_mass
    trajs = []
    for k, skill in enumerate(manifest.skill_ids()):
        controller = manifest.field_for(skill)
        for i in range(int(manifest.demos_per_skill)):
            rng = np.random.default_rng([int(manifest.seed), k, i])
            s_1 = rng.normal(0.0, config.init_std, size=2) if config.init_std > 0 else np.zeros(2)
            trajs.append(_simulate(config, controller, s_1, rng, skill))
    return Dataset(trajs, manifest)


# -- files --------------------------------------------------------------------


def trajectory_to_json(traj: Trajectory) -> str:
    rec = {"skill": traj.skill_id, "states": traj.states.tolist(), "actions": traj.actions.tolist()}
    return json.dumps(rec, separators=(",", ":"))


def trajectory_from_json(line: str) -> Trajectory:
    rec = json.loads(line)
    try:
        return Trajectory(np.array(rec["states"], dtype=np.float64),
                          np.array(rec["actions"], dtype=np.float64), str(rec["skill"]))
    except KeyError as exc:
        raise ValidationError(f"trajectory record missing {exc}") from exc


def write_trajectories(path, trajectories: Sequence[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trajectories:
            fh.write(trajectory_to_json(t))
            fh.write("\n")


def read_trajectories(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [trajectory_from_json(line) for line in fh if line.strip()]


def write_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> DatasetManifest:
    try:
        with open(path, encoding="utf-8") as fh:
            return DatasetManifest.from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def write_dataset(out_dir, dataset: Dataset) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_trajectories(os.path.join(out_dir, DATA_FILE), dataset.trajectories)
    write_manifest(os.path.join(out_dir, MANIFEST_FILE), dataset.manifest)


def read_dataset(data_dir) -> Dataset:
    manifest = read_manifest(os.path.join(data_dir, MANIFEST_FILE))
    trajs = read_trajectories(os.path.join(data_dir, DATA_FILE))
    known = set(manifest.skill_ids())
    unknown = {t.skill_id for t in trajs} - known
    if unknown:
        raise ValidationError(f"dataset has trajectories for undeclared skills {sorted(unknown)}")
    return Dataset(trajs, manifest)
