"""Adapting a demonstrated part trajectory to new endpoints and sampling
initial placements on the table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateEndpoints, SamplingExhausted
from .geom import Pose, quat_conj, quat_mul, quat_slerp, quat_yaw

_COINCIDENT = 1e-6  # m
_HORIZONTAL_EPS = 1e-12


@dataclass(eq=False)
class PartTrajectory:
    """Timestamped pose track of one object part, ``tau`` in R^{T x 7}."""

    part_id: str
    times: np.ndarray       # (T,) seconds, strictly increasing
    positions: np.ndarray   # (T, 3) meters
    orientations: np.ndarray  # (T, 4) wxyz
    frame: str = "table"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        q = np.asarray(self.orientations, dtype=float).reshape(-1, 4)
        self.orientations = q / np.linalg.norm(q, axis=1, keepdims=True)
        T = len(self.times)
        if T < 2:
            raise ValueError("a part trajectory needs at least 2 waypoints")
        if len(self.positions) != T or len(self.orientations) != T:
            raise ValueError("times, positions and orientations differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @classmethod
    def from_poses(cls, part_id, times, poses, frame="table"):
        return cls(part_id, times, [p.position for p in poses], [p.orientation for p in poses], frame)

    def __len__(self):
        return len(self.times)

    def pose(self, i) -> Pose:
        return Pose(self.positions[i], self.orientations[i])

    @property
    def start(self) -> Pose:
        return self.pose(0)

    @property
    def end(self) -> Pose:
        return self.pose(-1)

    @property
    def duration(self):
        return float(self.times[-1] - self.times[0])

    def as_array(self):
        """``(T, 7)`` array ``[x, y, z, qw, qx, qy, qz]``."""
        return np.hstack([self.positions, self.orientations])

    def pose_at(self, t) -> Pose:
        """Interpolated pose at time ``t`` (clamped to the track's range)."""
        t = min(max(float(t), self.times[0]), self.times[-1])
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), len(self.times) - 2)
        t0, t1 = self.times[k], self.times[k + 1]
        s = (t - t0) / (t1 - t0)
        if s <= 0.0:
            return self.pose(k)
        if s >= 1.0:
            return self.pose(k + 1)
        p = (1.0 - s) * self.positions[k] + s * self.positions[k + 1]
        return Pose(p, quat_slerp(self.orientations[k], self.orientations[k + 1], s))

    def path_length(self):
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))

    def reversed(self):
        """Same poses played backwards on the original clock."""
        t = self.times[0] + self.times[-1] - self.times[::-1]
        return PartTrajectory(self.part_id, t, self.positions[::-1], self.orientations[::-1], self.frame)

    def transformed(self, g: Pose):
        """Apply a world-frame rigid motion ``g`` to every waypoint."""
        pos = g.apply(self.positions)
        quats = quat_mul(g.orientation, self.orientations)
        return PartTrajectory(self.part_id, self.times.copy(), pos, quats, self.frame)


@dataclass
class Workspace:
    """Axis-aligned placement region in the table frame."""

    aabb_min: np.ndarray
    aabb_max: np.ndarray
    table_height: float = 0.0
    yaw_range: tuple = (-math.pi, math.pi)

    def __post_init__(self):
        self.aabb_min = np.asarray(self.aabb_min, dtype=float).reshape(3)
        self.aabb_max = np.asarray(self.aabb_max, dtype=float).reshape(3)
        if np.any(self.aabb_min >= self.aabb_max):
            raise ValueError("workspace aabb_min must be < aabb_max componentwise")
        self.yaw_range = (float(self.yaw_range[0]), float(self.yaw_range[1]))
        if self.yaw_range[0] > self.yaw_range[1]:
            raise ValueError("yaw_range lo > hi")

    @property
    def diagonal(self):
        """Horizontal diagonal length."""
        return float(np.linalg.norm((self.aabb_max - self.aabb_min)[:2]))

    @property
    def extent(self):
        """Largest horizontal side length."""
        return float(np.max((self.aabb_max - self.aabb_min)[:2]))

    def contains(self, p, tol=0.0):
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.aabb_min - tol) and np.all(p <= self.aabb_max + tol))


def resample_uniform(traj: PartTrajectory, T_out: int) -> PartTrajectory:
    """Resample onto ``T_out`` uniformly spaced timestamps.

    Positions are interpolated piecewise-linearly and orientations by slerp
    within each original segment. Both endpoints are reproduced exactly.
    """
    if T_out < 2:
        raise ValueError("T_out must be >= 2")
    t0, t1 = traj.times[0], traj.times[-1]
    times = np.linspace(t0, t1, T_out)
    times[0], times[-1] = t0, t1
    seg = np.clip(np.searchsorted(traj.times, times, side="right") - 1, 0, len(traj) - 2)
    ta = traj.times[seg]
    tb = traj.times[seg + 1]
    s = np.clip((times - ta) / (tb - ta), 0.0, 1.0)
    pos = (1.0 - s)[:, None] * traj.positions[seg] + s[:, None] * traj.positions[seg + 1]
    quats = np.empty((T_out, 4))
    for i, (k, si) in enumerate(zip(seg, s)):
        if si == 0.0:
            quats[i] = traj.orientations[k]
        elif si == 1.0:
            quats[i] = traj.orientations[k + 1]
        else:
            quats[i] = quat_slerp(traj.orientations[k], traj.orientations[k + 1], si)
    return PartTrajectory(traj.part_id, times, pos, quats, traj.frame)


def resample_dt(traj: PartTrajectory, dt: float) -> PartTrajectory:
    """Resample to the sample count closest to spacing ``dt``."""
    n = max(2, int(round(traj.duration / dt)) + 1)
    return resample_uniform(traj, n)


def _horizontal_similarity(d_old, d_new):
    """Yaw angle and horizontal scale mapping ``d_old``'s xy-projection onto ``d_new``'s."""
    a = d_old[:2]
    b = d_new[:2]
    na = math.hypot(a[0], a[1])
    nb = math.hypot(b[0], b[1])
    if na < _HORIZONTAL_EPS:
        # no horizontal direction to align; leave residuals untouched
        return 0.0, 1.0
    if nb < _HORIZONTAL_EPS:
        return 0.0, 0.0
    angle = math.atan2(a[0] * b[1] - a[1] * b[0], a[0] * b[0] + a[1] * b[1])
    return angle, nb / na


def retarget_trajectory(traj: PartTrajectory, new_start: Pose, new_end: Pose) -> PartTrajectory:
    """Map ``traj`` onto new endpoint poses while keeping its shape.

    Positions are split into the straight baseline between the endpoints and
    the residual around it. The residuals are carried over through the yaw
    rotation and horizontal scaling that maps the old baseline direction onto
    the new one; vertical residuals are kept as-is so lifts stay lifts.
    Orientations receive the start correction at the beginning, the end
    correction at the end, and a slerp of the two in between, which keeps the
    interior rotation detail of the original track.
    """
    p = traj.positions
    q = traj.orientations
    s = (traj.times - traj.times[0]) / (traj.times[-1] - traj.times[0])

    d_old = p[-1] - p[0]
    d_new = new_end.position - new_start.position
    if np.linalg.norm(d_old) <= _COINCIDENT and np.linalg.norm(d_new) > _COINCIDENT:
        raise DegenerateEndpoints(
            "original trajectory starts and ends at the same position but the targets do not")

    baseline = (1.0 - s)[:, None] * p[0] + s[:, None] * p[-1]
    resid = p - baseline
    angle, scale = _horizontal_similarity(d_old, d_new)
    c, sn = math.cos(angle), math.sin(angle)
    mapped = resid.copy()
    mapped[:, 0] = scale * (c * resid[:, 0] - sn * resid[:, 1])
    mapped[:, 1] = scale * (sn * resid[:, 0] + c * resid[:, 1])
    new_pos = ((1.0 - s)[:, None] * new_start.position + s[:, None] * new_end.position) + mapped
    # baseline residuals vanish identically at the ends; pin them against rounding
    new_pos[0] = new_start.position
    new_pos[-1] = new_end.position

    delta_start = quat_mul(new_start.orientation, quat_conj(q[0]))
    delta_end = quat_mul(new_end.orientation, quat_conj(q[-1]))
    deltas = quat_slerp(delta_start, delta_end, s)
    new_q = quat_mul(deltas, q)
    # the delta construction is exact at the ends up to rounding; use the targets
    new_q[0] = new_start.orientation
    new_q[-1] = new_end.orientation
    return PartTrajectory(traj.part_id, traj.times.copy(), new_pos, new_q, traj.frame)


def rigid_replay(traj: PartTrajectory, new_start: Pose) -> PartTrajectory:
    """Single-object case: the whole track moves rigidly with the new start.

    Equivalent to retargeting with ``new_end = new_start ∘ start⁻¹ ∘ end``.
    """
    g = new_start @ traj.start.inverse()
    return retarget_trajectory(traj, new_start, g @ traj.end)


def _segment_clearance(a, b, c):
    """Distance from point ``c`` to segment ``ab`` (2-D)."""
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else min(1.0, max(0.0, float((c - a) @ ab) / denom))
    return float(np.linalg.norm(a + t * ab - c))


@dataclass
class PlacementParams:
    d_min: float = 0.1
    max_tries: int = 1000
    rest_offset: float = 0.0
    base_orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))


def sample_initial_pose(ws: Workspace, goal: Pose, occupied, rng, params: PlacementParams | None = None,
                        **overrides) -> Pose:
    """Uniform placement in the workspace, rejected when too close to ``goal``.

    ``occupied`` is a list of ``(Pose, radius)`` discs; a sample is also rejected
    when the straight start->goal segment passes within a disc's radius (the
    object would have to travel through it).
    """
    params = replace(params or PlacementParams(), **overrides)
    if params.d_min >= ws.diagonal:
        raise SamplingExhausted(f"d_min={params.d_min} is not below the workspace diagonal {ws.diagonal:.3f}")
    z = ws.table_height + params.rest_offset
    if not ws.aabb_min[2] <= z <= ws.aabb_max[2]:
        raise SamplingExhausted(f"rest height {z} lies outside the workspace z-range")
    goal_xy = goal.position[:2]
    discs = [(np.asarray(pose.position[:2], dtype=float), float(r)) for pose, r in occupied]
    lo, hi = ws.aabb_min[:2], ws.aabb_max[:2]
    for _ in range(params.max_tries):
        xy = lo + rng.random(2) * (hi - lo)
        yaw = rng.uniform(*ws.yaw_range)
        if np.linalg.norm(xy - goal_xy) < params.d_min:
            continue
        if any(_segment_clearance(xy, goal_xy, c) < r for c, r in discs):
            continue
        return Pose([xy[0], xy[1], z], quat_mul(quat_yaw(yaw), params.base_orientation))
    raise SamplingExhausted(f"no admissible placement after {params.max_tries} tries")
