"""Parallel-jaw grasp generation on point-sampled part surfaces.

The pipeline is: oriented contact surface from a raw point set
(:func:`build_surface`), antipodal contact pairs found by casting a ray into
the surface along the inward normal (:func:`sample_antipodal`), association
of a tracked hand with the part it manipulates
(:func:`associate_grasped_part`), and kinematic feasibility screening
(:func:`select_grasp`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCloud, NoFeasibleGrasp, NoMotionDetected, NoTemporalOverlap
from .geom import Pose, matrix_to_quat

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class ContactSurface:
    """Oriented points in the part frame; normals point outward."""

    points: np.ndarray
    normals: np.ndarray
    resolution: float | None = None  # ray-cast cylinder radius (m)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        if len(n) != len(self.points):
            raise ValueError("points and normals differ in length")
        self.normals = n / np.linalg.norm(n, axis=1, keepdims=True)
        if self.resolution is None:
            if len(self.points) > 1:
                d, _ = cKDTree(self.points).query(self.points, k=2)
                self.resolution = float(np.median(d[:, 1]))
            else:
                self.resolution = 0.0

    def __len__(self):
        return len(self.points)


@dataclass
class GripperSpec:
    max_opening: float = 0.08
    min_opening: float = 0.0
    finger_depth: float = 0.04
    tcp_from_grasp: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if not 0.0 <= self.min_opening < self.max_opening:
            raise ValueError("gripper openings must satisfy 0 <= min_opening < max_opening")


@dataclass(eq=False)
class GraspCandidate:
    """Two-finger contact pair plus the grasp frame (x = closing axis, z = approach)."""

    c1: np.ndarray
    c2: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    axis: np.ndarray
    width: float
    grasp_pose: Pose
    quality: float
    mu: float

    def contact_angles(self):
        return antipodal_angles(self.c1, self.n1, self.c2, self.n2)

    def is_antipodal(self, mu=None):
        mu = self.mu if mu is None else mu
        a1, a2 = self.contact_angles()
        return bool(max(a1, a2) <= math.atan(mu))

    def flipped(self):
        """Same grasp with the fingers swapped (frame rotated by pi about z)."""
        return make_candidate(self.c2, self.n2, self.c1, self.n1, self.mu,
                              approach_hint=self.grasp_pose.rotation[:, 2])

    def to_dict(self):
        return {
            "c1": self.c1.tolist(), "c2": self.c2.tolist(),
            "n1": self.n1.tolist(), "n2": self.n2.tolist(),
            "width": float(self.width), "quality": float(self.quality), "mu": float(self.mu),
            "grasp_pose": self.grasp_pose.to_array().tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        c1, c2 = np.asarray(d["c1"], float), np.asarray(d["c2"], float)
        return cls(c1, c2, np.asarray(d["n1"], float), np.asarray(d["n2"], float),
                   (c2 - c1) / np.linalg.norm(c2 - c1), float(d["width"]),
                   Pose.from_array(d["grasp_pose"]), float(d["quality"]), float(d["mu"]))


# -- surface construction ----------------------------------------------------


def voxel_downsample(points, voxel):
    """Centroid of the points falling in each occupied voxel, sorted by voxel key."""
    points = np.asarray(points, dtype=float)
    if voxel is None or voxel <= 0:
        return points.copy()
    keys = np.floor((points - points.min(axis=0)) / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    out = np.zeros((len(counts), 3))
    np.add.at(out, inverse, points)
    return out / counts[:, None]


def _pca_normals(points, neighbors):
    """Smallest-variance direction of each neighborhood plus a rank-2 flag."""
    nb = points[neighbors]                      # (M, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", centered, centered)
    evals, evecs = np.linalg.eigh(cov)
    planar = evals[:, 1] > 1e-12 * np.maximum(evals[:, 2], 1e-300)
    return evecs[:, :, 0], planar


def _orient_outward(points, normals):
    centroid = points.mean(axis=0)
    d = points - centroid
    dn = np.linalg.norm(d, axis=1)
    dots = np.einsum("ij,ij->i", normals, d)
    ambiguous = np.abs(dots) <= 1e-6 * np.maximum(dn, 1e-300)
    normals = np.where((dots < 0)[:, None], -normals, normals)
    if np.any(ambiguous):
        # e.g. flat patches through the centroid: fall back to one global sense
        _, _, vt = np.linalg.svd(d, full_matrices=False)
        ref = vt[-1]
        if ref[np.argmax(np.abs(ref))] < 0:
            ref = -ref
        amb = normals[ambiguous]
        normals[ambiguous] = np.where((amb @ ref < 0)[:, None], -amb, amb)
    return normals


def build_surface(points, normal_k=12, voxel=0.004, smoothing_iters=1) -> ContactSurface:
    """Downsample a raw point set and estimate outward normals.

    Normals come from a plane fit over the ``normal_k`` nearest raw points of
    each voxel centroid, are oriented away from the cloud centroid, then
    averaged with their neighbors ``smoothing_iters`` times.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < normal_k + 1:
        raise ValueError(f"need at least normal_k + 1 = {normal_k + 1} points, got {len(points)}")
    down = voxel_downsample(points, voxel)
    _, nbr = cKDTree(points).query(down, k=normal_k)
    normals, planar = _pca_normals(points, nbr)
    if not np.any(planar):
        raise DegenerateCloud("no neighborhood spans a plane (collinear or repeated points)")
    down, normals = down[planar], normals[planar]
    normals = _orient_outward(down, normals)

    if smoothing_iters > 0 and len(down) > 1:
        k = min(normal_k, len(down))
        _, nbr_d = cKDTree(down).query(down, k=k)
        nbr_d = nbr_d.reshape(len(down), -1)
        for _ in range(smoothing_iters):
            nb = normals[nbr_d]
            sign = np.sign(np.einsum("mkj,mj->mk", nb, normals))
            sign[sign == 0] = 1.0
            avg = np.einsum("mk,mkj->mj", sign, nb)
            norm = np.linalg.norm(avg, axis=1, keepdims=True)
            normals = np.where(norm > 1e-12, avg / np.maximum(norm, 1e-300), normals)
        normals = _orient_outward(down, normals)

    resolution = voxel if voxel and voxel > 0 else None
    return ContactSurface(down, normals, resolution)


# -- antipodal sampling ------------------------------------------------------


def antipodal_angles(c1, n1, c2, n2):
    """Angles between each finger's push direction and the inward surface normal.

    Finger 1 pushes along ``+axis`` at ``c1`` and finger 2 along ``-axis`` at
    ``c2`` (``axis = (c2 - c1)/|c2 - c1|``); with outward normals the inward
    normals are ``-n1`` and ``-n2``.
    """
    c1, n1, c2, n2 = (np.asarray(a, dtype=float) for a in (c1, n1, c2, n2))
    d = c2 - c1
    w = np.linalg.norm(d, axis=-1, keepdims=True)
    axis = d / np.where(w > 0, w, 1.0)
    cos1 = np.clip(-np.sum(n1 * axis, axis=-1), -1.0, 1.0)
    cos2 = np.clip(np.sum(n2 * axis, axis=-1), -1.0, 1.0)
    return np.arccos(cos1), np.arccos(cos2)


def antipodal_decisions(surface: ContactSurface, pairs, mu, gripper: GripperSpec):
    """Accept/reject mask (and contact angles) for index pairs ``(i, j)``."""
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    P, N = surface.points, surface.normals
    c1, c2 = P[pairs[:, 0]], P[pairs[:, 1]]
    a1, a2 = antipodal_angles(c1, N[pairs[:, 0]], c2, N[pairs[:, 1]])
    width = np.linalg.norm(c2 - c1, axis=1)
    cone = math.atan(mu)
    ok = (a1 <= cone) & (a2 <= cone) & (width >= gripper.min_opening) & (width <= gripper.max_opening)
    ok &= pairs[:, 0] != pairs[:, 1]
    return ok, a1, a2, width


def propose_contact_pairs(surface: ContactSurface, n_samples, rng):
    """Draw first contacts and ray-cast through the surface for the opposing contact.

    The ray starts at the first contact and travels along its inward normal;
    every surface point within ``surface.resolution`` of the ray and farther
    along it than one resolution step is a hit, and the farthest hit becomes
    the second contact. Rays with no hit are dropped.
    """
    P, N = surface.points, surface.normals
    r = max(surface.resolution, 1e-9)
    first = rng.integers(0, len(P), size=n_samples)
    pairs = []
    for i in first:
        ray = -N[i]
        v = P - P[i]
        along = v @ ray
        perp = np.linalg.norm(v - along[:, None] * ray, axis=1)
        hit = (along > r) & (perp <= r)
        if not np.any(hit):
            continue
        j = int(np.flatnonzero(hit)[np.argmax(along[hit])])
        pairs.append((int(i), j))
    return np.array(pairs, dtype=int).reshape(-1, 2)


def make_candidate(c1, n1, c2, n2, mu, approach_hint=(0.0, 0.0, -1.0), quality=None) -> GraspCandidate:
    """Grasp frame with x along the closing axis and z as close to ``approach_hint`` as allowed."""
    c1, n1, c2, n2 = (np.asarray(a, dtype=float) for a in (c1, n1, c2, n2))
    d = c2 - c1
    width = float(np.linalg.norm(d))
    x = d / width
    hint = np.asarray(approach_hint, dtype=float)
    z = hint - (hint @ x) * x
    if np.linalg.norm(z) < 1e-6:
        # closing axis parallel to the hint: any perpendicular will do
        helper = np.array([1.0, 0.0, 0.0]) if abs(x[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        z = np.cross(x, helper)
    z /= np.linalg.norm(z)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    pose = Pose(0.5 * (c1 + c2), matrix_to_quat(R))
    if quality is None:
        a1, a2 = antipodal_angles(c1, n1, c2, n2)
        quality = 1.0 - max(float(a1), float(a2)) / math.atan(mu)
    return GraspCandidate(c1, c2, n1, n2, x, width, pose, float(quality), float(mu))


def sample_antipodal(surface: ContactSurface, gripper: GripperSpec, mu, n_samples, rng,
                     approach_hint=(0.0, 0.0, -1.0)):
    """Antipodal grasp candidates sorted by friction-cone margin (best first).

    Quality is ``1 - max(angle1, angle2) / atan(mu)``; duplicate contact pairs
    are reported once.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    pairs = propose_contact_pairs(surface, n_samples, rng)
    if len(pairs) == 0:
        return []
    ok, a1, a2, _ = antipodal_decisions(surface, pairs, mu, gripper)
    cone = math.atan(mu)
    seen = set()
    out = []
    for (i, j), accept, ang1, ang2 in zip(pairs, ok, a1, a2):
        key = (min(i, j), max(i, j))
        if not accept or key in seen:
            continue
        seen.add(key)
        P, N = surface.points, surface.normals
        out.append(make_candidate(P[i], N[i], P[j], N[j], mu, approach_hint,
                                  quality=1.0 - max(ang1, ang2) / cone))
    out.sort(key=lambda g: -g.quality)
    return out


# -- demonstration analysis --------------------------------------------------


@dataclass(eq=False)
class HandTrack:
    hand_id: str
    times: np.ndarray
    index_tip: np.ndarray
    thumb_tip: np.ndarray

    def __post_init__(self):
        if self.hand_id not in ("left", "right"):
            raise ValueError(f"hand_id must be 'left' or 'right', got {self.hand_id!r}")
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.index_tip = np.asarray(self.index_tip, dtype=float).reshape(-1, 3)
        self.thumb_tip = np.asarray(self.thumb_tip, dtype=float).reshape(-1, 3)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("hand track timestamps must be strictly increasing")

    def contact_point(self, t):
        """Mean fingertip position at time ``t`` (linear interpolation)."""
        mid = 0.5 * (self.index_tip + self.thumb_tip)
        return np.array([np.interp(t, self.times, mid[:, k]) for k in range(3)])


def _centroid_track(track):
    if hasattr(track, "times") and hasattr(track, "positions"):
        return np.asarray(track.times, float), np.asarray(track.positions, float)
    times = np.array([float(t) for t, _ in track])
    pos = np.array([np.asarray(p, dtype=float) for _, p in track]).reshape(-1, 3)
    return times, pos


def associate_grasped_part(hand: HandTrack, part_centroids):
    """Part with the smallest summed fingertip distance over the demonstration.

    ``part_centroids`` maps part id to a track, either a list of ``(t, xyz)``
    pairs or an object with ``times``/``positions``. Distances are evaluated at
    the hand timestamps inside each part track's time range; the per-frame
    distance is the mean of the index-tip and thumb-tip distances. Exact ties
    go to the lexicographically smallest id.
    """
    totals = {}
    for pid in sorted(part_centroids):
        ct, cp = _centroid_track(part_centroids[pid])
        mask = (hand.times >= ct[0]) & (hand.times <= ct[-1])
        if not np.any(mask):
            raise NoTemporalOverlap(f"hand track {hand.hand_id!r} and part {pid!r} do not overlap in time")
        t = hand.times[mask]
        c = np.stack([np.interp(t, ct, cp[:, k]) for k in range(3)], axis=1)
        d = 0.5 * (np.linalg.norm(hand.index_tip[mask] - c, axis=1)
                   + np.linalg.norm(hand.thumb_tip[mask] - c, axis=1))
        totals[pid] = float(d.sum())
    if not totals:
        raise NoTemporalOverlap("no part tracks given")
    best = min(totals.values())
    tied = [pid for pid, v in totals.items() if v <= best + 1e-12 * max(1.0, abs(best))]
    if len(tied) > 1:
        logger.warning("hand %s: parts %s tie at aggregate distance %.6g; choosing %r",
                       hand.hand_id, tied, best, tied[0])
    return tied[0], totals[tied[0]]


def detect_grasp_window(part_traj, v_eps=0.02, pad=2):
    """``(t_grasp, t_release)`` bracketing the frames where the part moves.

    A frame counts as moving when the centroid speed on either adjacent
    segment exceeds ``v_eps``; the window is padded by ``pad`` frames on each
    side and clamped to the track.
    """
    t = part_traj.times
    if len(t) < 3:
        raise ValueError("grasp window detection needs at least 3 frames")
    speed = np.linalg.norm(np.diff(part_traj.positions, axis=0), axis=1) / np.diff(t)
    fast = speed > v_eps
    moving = np.zeros(len(t), dtype=bool)
    moving[:-1] |= fast
    moving[1:] |= fast
    idx = np.flatnonzero(moving)
    if len(idx) == 0:
        raise NoMotionDetected(f"part {part_traj.part_id!r} never exceeds {v_eps} m/s")
    first = max(0, int(idx[0]) - pad)
    last = min(len(t) - 1, int(idx[-1]) + pad)
    return float(t[first]), float(t[last])


def select_grasp(candidates, object_traj, model, arm, q_seed, cfg=None,
                 tcp_from_grasp=None, base=None, probe_iters=200, dofs=None):
    """Best-quality candidate whose end-effector targets are reachable.

    Each candidate is probed with :func:`demoforge.diffik.solve_step` at the
    start, middle and end of ``object_traj`` (warm-started in that order,
    without the per-step velocity bound). Probes are pure reachability tests,
    so the smoothness term, which would bias these large jumps towards the
    seed, is switched off.
    """
    from .diffik import SolverConfig, solve_step

    if not candidates:
        raise NoFeasibleGrasp("no grasp candidates")
    cfg = cfg or SolverConfig()
    probe_cfg = replace(cfg, max_iters=probe_iters, w_smooth=0.0)
    tcp = tcp_from_grasp or Pose.identity()
    base_inv = (base or Pose.identity()).inverse()
    T = len(object_traj)
    probe_idx = [0, T // 2, T - 1]
    for cand in candidates:
        q = np.asarray(q_seed, dtype=float)
        ok = True
        for k in probe_idx:
            target = base_inv @ object_traj.pose(k) @ cand.grasp_pose @ tcp
            sol = solve_step(model, arm, q, target, probe_cfg, dofs=dofs, clamp_velocity=False,
                             raise_on_divergence=False)
            if not sol.success:
                ok = False
                break
            q = sol.q
        if ok:
            return cand
    raise NoFeasibleGrasp(f"none of {len(candidates)} candidates is reachable")
