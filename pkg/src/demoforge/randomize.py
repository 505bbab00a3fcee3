"""Reproducible domain-randomization draws.

Every demo gets its own generator keyed by ``derive_seed(master_seed, index)``,
so a draw depends only on the config and the demo index, never on worker
count or scheduling order. Streams use numpy's Philox4x64 counter-based
generator, which is bit-stable across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Pose, quat_from_axis_angle, quat_mul
from .retarget import PlacementParams, Workspace, sample_initial_pose

MASK64 = (1 << 64) - 1
# SplitMix64 increment and finalizer multipliers (Steele, Lea & Flood 2014)
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_MUL_1 = 0xBF58476D1CE4E5B9
MIX_MUL_2 = 0x94D049BB133111EB


def splitmix64(x: int) -> int:
    """One SplitMix64 step: add the golden gamma, then the bijective finalizer."""
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * MIX_MUL_1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_MUL_2) & MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, demo_index: int) -> int:
    """64-bit per-demo seed, injective in ``demo_index`` for a fixed master and
    injective in ``master_seed`` for a fixed index."""
    base = splitmix64(int(master_seed) & MASK64)
    return splitmix64((base + int(demo_index) * GOLDEN_GAMMA) & MASK64)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & MASK64))


def _range(v):
    lo, hi = (float(v[0]), float(v[1]))
    if lo > hi:
        raise ValueError(f"range lo > hi: {v}")
    return lo, hi


@dataclass
class RandomizationConfig:
    cam_trans_max: float = 0.02
    cam_rot_max: float = math.radians(5.0)
    light_count: tuple = (1, 3)
    light_intensity: tuple = (500.0, 1500.0)
    light_color_temp: tuple = (2700.0, 6500.0)
    light_pos_min: tuple = (-1.0, -1.0, 1.0)
    light_pos_max: tuple = (1.0, 1.0, 2.0)
    workspace: Workspace | None = None
    d_min: float = 0.1
    max_tries: int = 1000
    q0_perturb: float = 0.05
    master_seed: int = 0

    def __post_init__(self):
        if self.cam_trans_max < 0 or self.cam_rot_max < 0 or self.q0_perturb < 0 or self.d_min < 0:
            raise ValueError("randomization maxima must be non-negative")
        self.light_count = tuple(int(v) for v in _range(self.light_count))
        self.light_intensity = _range(self.light_intensity)
        self.light_color_temp = _range(self.light_color_temp)
        if self.light_count[0] < 0:
            raise ValueError("light_count must be non-negative")
        if np.any(np.asarray(self.light_pos_min) > np.asarray(self.light_pos_max)):
            raise ValueError("light_pos_min must be <= light_pos_max")


@dataclass(eq=False)
class SceneDraw:
    camera_poses: dict
    lights: list
    object_inits: dict
    q0: np.ndarray | None
    seed: int
    articulation_offset: float = 0.0

    def to_dict(self):
        return {
            "seed": int(self.seed),
            "camera_poses": {k: v.to_array().tolist() for k, v in self.camera_poses.items()},
            "lights": [{"position": [float(x) for x in l["position"]],
                        "intensity": float(l["intensity"]),
                        "color_temp": float(l["color_temp"])} for l in self.lights],
            "object_inits": {k: v.to_array().tolist() for k, v in self.object_inits.items()},
            "q0": None if self.q0 is None else [float(x) for x in self.q0],
            "articulation_offset": float(self.articulation_offset),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            {k: Pose.from_array(v) for k, v in d["camera_poses"].items()},
            [dict(l) for l in d["lights"]],
            {k: Pose.from_array(v) for k, v in d["object_inits"].items()},
            None if d.get("q0") is None else np.asarray(d["q0"], dtype=float),
            int(d["seed"]),
            float(d.get("articulation_offset", 0.0)),
        )


def _unit_vector(rng):
    v = rng.standard_normal(3)
    n = np.linalg.norm(v)
    while n < 1e-12:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
    return v / n


def sample_camera_perturbation(rng, nominal: Pose, cfg: RandomizationConfig) -> Pose:
    """Extrinsics jitter: translation uniform in a ball of radius ``cam_trans_max``,
    rotation about a uniform axis by an angle uniform in ``[0, cam_rot_max]``."""
    direction = _unit_vector(rng)
    radius = cfg.cam_trans_max * rng.random() ** (1.0 / 3.0)
    axis = _unit_vector(rng)
    angle = cfg.cam_rot_max * rng.random()
    if cfg.cam_trans_max == 0.0 and cfg.cam_rot_max == 0.0:
        return Pose(nominal.position.copy(), nominal.orientation.copy())
    return Pose(nominal.position + radius * direction,
                quat_mul(quat_from_axis_angle(axis, angle), nominal.orientation))


def draw_scene(cfg: RandomizationConfig, nominal_cameras, goal_pose, occupied, demo_index, *,
               parts=None, q0_nominal=None, q_lower=None, q_upper=None,
               articulation_range=None) -> SceneDraw:
    """All randomized scene quantities for one demo.

    ``parts`` maps part id -> :class:`PlacementParams` for every part whose
    initial pose is resampled (``d_min``/``max_tries`` come from ``cfg``).
    Draw order is fixed: cameras (sorted by name), lights, parts (sorted),
    joint perturbation, articulation offset.
    """
    seed = derive_seed(cfg.master_seed, demo_index)
    rng = make_rng(seed)

    cameras = {name: sample_camera_perturbation(rng, nominal_cameras[name], cfg)
               for name in sorted(nominal_cameras)}

    lo_n, hi_n = cfg.light_count
    n_lights = int(rng.integers(lo_n, hi_n + 1))
    pmin = np.asarray(cfg.light_pos_min, dtype=float)
    pmax = np.asarray(cfg.light_pos_max, dtype=float)
    lights = []
    for _ in range(n_lights):
        lights.append({
            "position": pmin + rng.random(3) * (pmax - pmin),
            "intensity": rng.uniform(*cfg.light_intensity),
            "color_temp": rng.uniform(*cfg.light_color_temp),
        })

    inits = {}
    for pid in sorted(parts or {}):
        base = parts[pid]
        params = PlacementParams(d_min=cfg.d_min, max_tries=cfg.max_tries,
                                 rest_offset=base.rest_offset, base_orientation=base.base_orientation)
        inits[pid] = sample_initial_pose(cfg.workspace, goal_pose, occupied, rng, params)

    q0 = None
    if q0_nominal is not None:
        q0_nominal = np.asarray(q0_nominal, dtype=float)
        q0 = q0_nominal + rng.uniform(-cfg.q0_perturb, cfg.q0_perturb, size=q0_nominal.shape)
        if q_lower is not None:
            q0 = np.clip(q0, q_lower, q_upper)

    offset = 0.0
    if articulation_range is not None:
        offset = rng.uniform(*_range(articulation_range))

    return SceneDraw(cameras, lights, inits, q0, seed, offset)
