"""Demo records, action formats, render manifests and the attachment audit.

A record is stored as JSON lines: the first line holds ``meta``, ``scene``
and per-arm residuals, every following line is one frame. Floats are written
with Python's shortest round-trip repr, so parse -> dump is a fixpoint.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatUnavailable
from .geom import Pose, geodesic_angle, matrix_to_quat, rotation_6d, rotation_from_6d

logger = logging.getLogger(__name__)

ACTION_FORMATS = ("delta_ee_6d", "delta_joint")
MANIFEST_FORMAT = "demoforge.render/1"


def _dumps(obj):
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def pose_list(p: Pose):
    return [float(v) for v in p.to_array()]


@dataclass(eq=False)
class DemoRecord:
    """One synthesized demonstration.

    ``frames`` entries are plain dicts::

        {"t": float, "phase": str, "q": [...all actuated joints...],
         "arms": {ee_frame: {"q": [...], "gripper": g, "ee": [7]}},
         "objects": {part_id: [7]}, "cameras": {name: [7]}}
    """

    meta: dict
    frames: list = field(default_factory=list)
    scene: dict | None = None
    residuals: dict = field(default_factory=dict)

    @property
    def success(self):
        return bool(self.meta.get("success"))

    @property
    def arms(self):
        return list(self.meta.get("arms", {}))

    def times(self):
        return np.array([f["t"] for f in self.frames])

    def arm_q(self, arm):
        return np.array([f["arms"][arm]["q"] for f in self.frames])

    def full_q(self):
        return np.array([f["q"] for f in self.frames])

    def gripper(self, arm):
        return np.array([f["arms"][arm]["gripper"] for f in self.frames])

    def ee_poses(self, arm):
        return [Pose.from_array(f["arms"][arm]["ee"]) for f in self.frames]

    def object_poses(self, part_id):
        return [Pose.from_array(f["objects"][part_id]) for f in self.frames]

    def to_jsonl(self) -> str:
        head = {"meta": self.meta, "scene": self.scene, "residuals": self.residuals}
        return "\n".join([_dumps(head)] + [_dumps(f) for f in self.frames]) + "\n"

    @classmethod
    def from_jsonl(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty demo record")
        head = json.loads(lines[0])
        return cls(head["meta"], [json.loads(ln) for ln in lines[1:]], head.get("scene"),
                   head.get("residuals", {}))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_jsonl(fh.read())


# -- actions -------------------------------------------------------------------


def _require_success(record, what):
    if not record.success or not record.frames:
        raise FormatUnavailable(f"{what} needs a success record (demo {record.meta.get('demo_index')})")


def emit_actions(record: DemoRecord, fmt="delta_ee_6d"):
    """Per-step action vectors, shape ``(N - 1, D)``.

    Row ``i`` moves frame ``i`` to frame ``i + 1``. Arms are concatenated in
    record order. ``delta_ee_6d`` gives 10 values per arm: the world-frame
    position delta, the first two columns of ``R_{i+1} R_i^T`` and the
    absolute gripper opening at ``i + 1``. ``delta_joint`` gives
    ``q_{i+1} - q_i`` for the arm joints followed by the gripper opening.
    """
    if fmt not in ACTION_FORMATS:
        raise FormatUnavailable(f"unknown action format {fmt!r}; expected one of {ACTION_FORMATS}")
    _require_success(record, "emit_actions")
    blocks = []
    for arm in record.arms:
        g = record.gripper(arm)[1:, None]
        if fmt == "delta_joint":
            q = record.arm_q(arm)
            blocks.append(np.hstack([np.diff(q, axis=0), g]))
            continue
        poses = record.ee_poses(arm)
        rows = []
        for a, b in zip(poses[:-1], poses[1:]):
            dR = b.rotation @ a.rotation.T
            rows.append(np.concatenate([b.position - a.position, rotation_6d(dR)]))
        blocks.append(np.hstack([np.array(rows).reshape(-1, 9), g]))
    return np.hstack(blocks) if blocks else np.zeros((max(len(record.frames) - 1, 0), 0))


def integrate_actions(record: DemoRecord, actions, fmt="delta_ee_6d"):
    """Rebuild per-arm trajectories from frame 0 of ``record`` and ``actions``.

    Returns ``{arm: {"gripper": (N,), "ee": [Pose] | "q": (N, n)}}``.
    """
    if fmt not in ACTION_FORMATS:
        raise FormatUnavailable(f"unknown action format {fmt!r}")
    _require_success(record, "integrate_actions")
    actions = np.asarray(actions, dtype=float)
    out = {}
    col = 0
    for arm in record.arms:
        first = record.frames[0]["arms"][arm]
        g0 = float(first["gripper"])
        if fmt == "delta_joint":
            n = len(first["q"])
            d = actions[:, col:col + n]
            q = np.vstack([np.asarray(first["q"], dtype=float), d])
            out[arm] = {"q": np.cumsum(q, axis=0),
                        "gripper": np.concatenate([[g0], actions[:, col + n]])}
            col += n + 1
            continue
        p = np.asarray(first["ee"][:3], dtype=float)
        R = Pose.from_array(first["ee"]).rotation
        poses = [Pose.from_array(first["ee"])]
        for row in actions[:, col:col + 10]:
            p = p + row[:3]
            R = rotation_from_6d(row[3:9]) @ R
            poses.append(Pose(p, matrix_to_quat(R)))
        out[arm] = {"ee": poses, "gripper": np.concatenate([[g0], actions[:, col + 9]])}
        col += 10
    return out


def roundtrip_error(record: DemoRecord, fmt="delta_ee_6d"):
    """Largest reconstruction error of :func:`integrate_actions` against the record."""
    rec = integrate_actions(record, emit_actions(record, fmt), fmt)
    worst = 0.0
    for arm, r in rec.items():
        worst = max(worst, float(np.max(np.abs(r["gripper"] - record.gripper(arm)))))
        if fmt == "delta_joint":
            worst = max(worst, float(np.max(np.abs(r["q"] - record.arm_q(arm)))))
        else:
            for a, b in zip(r["ee"], record.ee_poses(arm)):
                worst = max(worst, float(np.linalg.norm(a.position - b.position)),
                            float(geodesic_angle(a.orientation, b.orientation)))
    return worst


# -- render manifest -------------------------------------------------------------


def export_render_manifest(record: DemoRecord, spec) -> dict:
    """Self-contained kinematic-replay description of a success record.

    Robot link poses are recomputed by forward kinematics from the stored
    joint vector of every frame and expressed in the world (table) frame.
    """
    _require_success(record, "export_render_manifest")
    model = spec.model
    base = spec.base_pose
    assets = {a.part_id: a.mesh for a in spec.assets}
    frames = []
    for f in record.frames:
        fk = model.forward_kinematics(np.asarray(f["q"], dtype=float), check_limits=False)
        frames.append({
            "t": f["t"],
            "links": {ln: pose_list(base @ fk[ln]) for ln in model.links},
            "parts": dict(f["objects"]),
            "cameras": dict(f["cameras"]),
        })
    scene = record.scene or {}
    return {
        "format": MANIFEST_FORMAT,
        "task": record.meta["task"],
        "demo_index": record.meta["demo_index"],
        "bodies": "kinematic",
        "image_size": list(spec.image_size),
        "assets": assets,
        "robot": {"name": model.name, "links": list(model.links),
                  "meshes": [[ln, fn] for ln, fn in model.assets]},
        "cameras": {name: {"intrinsics": spec.intrinsics.get(name, {})} for name in sorted(spec.cameras)},
        "lights": scene.get("lights", []),
        "frames": frames,
    }


def check_manifest(manifest):
    missing = set()
    for f in manifest["frames"]:
        missing |= set(f["parts"]) - set(manifest["assets"])
    if missing:
        raise ValueError(f"manifest pose blocks reference unknown parts {sorted(missing)}")


def manifest_dumps(manifest) -> str:
    return _dumps(manifest) + "\n"


def load_render_manifest(path) -> dict:
    with open(path) as fh:
        m = json.load(fh)
    check_manifest(m)
    return m


# -- attachment audit ------------------------------------------------------------


def audit_record(record: DemoRecord, model, base: Pose, pos_tol, rot_tol):
    """Re-derive object poses on transport frames from stored joints alone.

    For each arm holding a part, the object pose implied by the end effector
    (``base @ FK(q) @ tcp^-1 @ grasp^-1``) must match the stored object pose
    within the tolerances. Returns a list of violation dicts (empty if clean).
    """
    bad = []
    for arm, info in record.meta.get("arms", {}).items():
        part = info.get("part")
        if not part:
            continue
        ee_from_obj = (Pose.from_array(info["grasp_pose"]) @ Pose.from_array(info["tcp_from_grasp"])).inverse()
        for i, f in enumerate(record.frames):
            if f["phase"] != "transport":
                continue
            ee = Pose.from_matrix(model.link_matrix(np.asarray(f["q"], dtype=float), arm))
            pred = base @ ee @ ee_from_obj
            stored = Pose.from_array(f["objects"][part])
            pe = float(np.linalg.norm(pred.position - stored.position))
            re = float(geodesic_angle(pred.orientation, stored.orientation))
            if pe > pos_tol or re > rot_tol:
                bad.append({"frame": i, "arm": arm, "part": part, "pos_err": pe, "rot_err": re})
    return bad
