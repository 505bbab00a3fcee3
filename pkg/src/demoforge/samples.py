"""Reference robots, objects and demonstration tasks.

These synthetic fixtures stand in for real scans and tracked videos: a
7-DOF panda-like arm, a mirrored two-arm rig, small planar arms with
closed-form kinematics, sampled object surfaces, and demo tracks for the four
goal types. ``write_task`` materializes a complete task directory.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .geom import Pose, quat_from_rpy
from .grasp import HandTrack
from .io import save_hand_track, save_trajectory, write_ply
from .retarget import PartTrajectory

PI = math.pi

# name, origin xyz, origin rpy, lower, upper, velocity (rad/s); every axis is +z
ARM7_JOINTS = [
    ("joint1", (0.0, 0.0, 0.333), (0.0, 0.0, 0.0), -2.8973, 2.8973, 2.175),
    ("joint2", (0.0, 0.0, 0.0), (-PI / 2, 0.0, 0.0), -1.7628, 1.7628, 2.175),
    ("joint3", (0.0, -0.316, 0.0), (PI / 2, 0.0, 0.0), -2.8973, 2.8973, 2.175),
    ("joint4", (0.0825, 0.0, 0.0), (PI / 2, 0.0, 0.0), -3.0718, -0.0698, 2.175),
    ("joint5", (-0.0825, 0.384, 0.0), (-PI / 2, 0.0, 0.0), -2.8973, 2.8973, 2.61),
    ("joint6", (0.0, 0.0, 0.0), (PI / 2, 0.0, 0.0), -0.0175, 3.7525, 2.61),
    ("joint7", (0.088, 0.0, 0.0), (PI / 2, 0.0, 0.0), -2.8973, 2.8973, 2.61),
]
ARM7_HOME = (0.0, -PI / 4, 0.0, -3 * PI / 4, 0.0, PI / 2, PI / 4)
FINGER_TRAVEL = 0.04


def _f(vals):
    return " ".join(repr(float(v)) for v in vals)


def _joint(name, jtype, parent, child, xyz=(0, 0, 0), rpy=(0, 0, 0), axis=None, limit=None, mimic=None):
    lines = [f'  <joint name="{name}" type="{jtype}">',
             f'    <parent link="{parent}"/>', f'    <child link="{child}"/>',
             f'    <origin xyz="{_f(xyz)}" rpy="{_f(rpy)}"/>']
    if axis is not None:
        lines.append(f'    <axis xyz="{_f(axis)}"/>')
    if limit is not None:
        lo, hi, vel = limit
        lines.append(f'    <limit lower="{lo!r}" upper="{hi!r}" effort="87.0" velocity="{vel!r}"/>')
    if mimic is not None:
        lines.append(f'    <mimic joint="{mimic}" multiplier="1.0" offset="0.0"/>')
    lines.append("  </joint>")
    return lines


def _link(name, mesh=None):
    if mesh is None:
        return [f'  <link name="{name}"/>']
    return [f'  <link name="{name}">', "    <visual>", "      <geometry>",
            f'        <mesh filename="{mesh}"/>', "      </geometry>", "    </visual>", "  </link>"]


def _arm_body(prefix, mount_parent, mount_xyz, mount_rpy, mirror=False):
    """Links and joints of one arm. ``mirror`` reflects it through the xz-plane."""

    def m_xyz(v):
        return (v[0], -v[1], v[2]) if mirror else v

    def m_rpy(v):
        return (-v[0], v[1], -v[2]) if mirror else v

    def m_axis(v):
        # a reflected revolute axis flips sign so joint values stay equal
        return (-v[0], v[1], -v[2]) if mirror else v

    def m_paxis(v):
        return (v[0], -v[1], v[2]) if mirror else v

    p = prefix
    lines = []
    lines += _link(f"{p}link0", f"package://demoforge/meshes/{p}link0.obj")
    lines += _joint(f"{p}mount", "fixed", mount_parent, f"{p}link0", mount_xyz, mount_rpy)
    parent = f"{p}link0"
    for k, (name, xyz, rpy, lo, hi, vel) in enumerate(ARM7_JOINTS, start=1):
        child = f"{p}link{k}"
        lines += _link(child, f"package://demoforge/meshes/{p}link{k}.obj")
        lines += _joint(f"{p}{name}", "revolute", parent, child, m_xyz(xyz), m_rpy(rpy), m_axis((0.0, 0.0, 1.0)),
                        (lo, hi, vel))
        parent = child
    lines += _link(f"{p}link8")
    lines += _joint(f"{p}flange", "fixed", parent, f"{p}link8", (0.0, 0.0, 0.107))
    lines += _link(f"{p}hand", f"package://demoforge/meshes/{p}hand.obj")
    lines += _joint(f"{p}hand_joint", "fixed", f"{p}link8", f"{p}hand", rpy=m_rpy((0.0, 0.0, -PI / 4)))
    lines += _link(f"{p}tcp")
    # tcp x axis is the finger closing axis, z points out of the palm
    lines += _joint(f"{p}tcp_joint", "fixed", f"{p}hand", f"{p}tcp", (0.0, 0.0, 0.1034), m_rpy((0.0, 0.0, PI / 2)))
    lines += _link(f"{p}leftfinger")
    lines += _link(f"{p}rightfinger")
    lines += _joint(f"{p}finger_joint1", "prismatic", f"{p}hand", f"{p}leftfinger", (0.0, 0.0, 0.0584),
                    axis=m_paxis((0.0, 1.0, 0.0)), limit=(0.0, FINGER_TRAVEL, 0.2))
    lines += _joint(f"{p}finger_joint2", "prismatic", f"{p}hand", f"{p}rightfinger", (0.0, 0.0, 0.0584),
                    axis=m_paxis((0.0, -1.0, 0.0)), limit=(0.0, FINGER_TRAVEL, 0.2), mimic=f"{p}finger_joint1")
    return lines


def arm7_urdf(name="arm7"):
    lines = ['<?xml version="1.0"?>', f'<robot name="{name}">']
    lines += _link("world")
    lines += _arm_body("", "world", (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    lines.append("</robot>")
    return "\n".join(lines) + "\n"


def bimanual_urdf(name="twin_arm7", half_gap=0.3):
    """Two arm7 copies, the left one the mirror image of the right."""
    lines = ['<?xml version="1.0"?>', f'<robot name="{name}">']
    lines += _link("torso")
    lines += _arm_body("right_", "torso", (0.0, -half_gap, 0.0), (0.0, 0.0, 0.0))
    lines += _arm_body("left_", "torso", (0.0, half_gap, 0.0), (0.0, 0.0, 0.0), mirror=True)
    lines.append("</robot>")
    return "\n".join(lines) + "\n"


def arm7_home(prefix=""):
    return {f"{prefix}joint{k + 1}": v for k, v in enumerate(ARM7_HOME)}


def planar_urdf(lengths=(1.0, 1.0), wrist_limit=None, name="planar"):
    """Planar chain in the xy-plane with joints about +z.

    ``lengths`` are the link lengths; with ``wrist_limit`` an extra revolute
    wrist joint (limits ``±wrist_limit``) sits at the tip and carries ``tcp``.
    """
    lines = ['<?xml version="1.0"?>', f'<robot name="{name}">', *_link("base")]
    parent = "base"
    offset = 0.0
    for k, L in enumerate(lengths, start=1):
        lines += _link(f"link{k}")
        lines += _joint(f"j{k}", "revolute", parent, f"link{k}", (offset, 0.0, 0.0), axis=(0, 0, 1),
                        limit=(-PI, PI, 10.0))
        parent, offset = f"link{k}", L
    if wrist_limit is not None:
        lines += _link("wrist")
        lines += _joint("wrist", "revolute", parent, "wrist", (offset, 0.0, 0.0), axis=(0, 0, 1),
                        limit=(-wrist_limit, wrist_limit, 10.0))
        lines += _link("tcp")
        lines += _joint("tcp_joint", "fixed", "wrist", "tcp")
    else:
        lines += _link("tip")
        lines += _joint("tip_joint", "fixed", parent, "tip", (offset, 0.0, 0.0))
    lines.append("</robot>")
    return "\n".join(lines) + "\n"


def random_chain_urdf(rng, n_joints, name="random_chain"):
    """Serial chain with random offsets, rotated origins, axes and joint types."""
    lines = ['<?xml version="1.0"?>', f'<robot name="{name}">', *_link("l0")]
    for k in range(1, n_joints + 1):
        jtype = "prismatic" if rng.random() < 0.25 else "revolute"
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        limit = (-0.5, 0.5, 1.0) if jtype == "prismatic" else (-PI, PI, 2.0)
        lines += _link(f"l{k}")
        lines += _joint(f"j{k}", jtype, f"l{k - 1}", f"l{k}", rng.uniform(-0.3, 0.3, 3),
                        rng.uniform(-PI, PI, 3), axis, limit)
    lines += _link("ee")
    lines += _joint("ee_joint", "fixed", f"l{n_joints}", "ee", rng.uniform(-0.2, 0.2, 3), rng.uniform(-PI, PI, 3))
    lines.append("</robot>")
    return "\n".join(lines) + "\n"


# -- object surfaces -------------------------------------------------------------


def fibonacci_sphere(n=500, radius=1.0):
    """``n`` near-uniform points on a sphere with their outward normals."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    phi = k * PI * (3.0 - math.sqrt(5.0))
    normals = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return radius * normals, normals


def ellipsoid_points(axes, n=1500):
    pts, nrm = fibonacci_sphere(n)
    a = np.asarray(axes, dtype=float)
    normals = nrm / a
    return pts * a, normals / np.linalg.norm(normals, axis=1, keepdims=True)


def box_points(size, center=(0.0, 0.0, 0.0), spacing=0.005):
    """Grid samples on the six faces of an axis-aligned box, with normals."""
    size = np.asarray(size, dtype=float)
    center = np.asarray(center, dtype=float)
    half = size / 2
    pts, nrm = [], []
    for ax in range(3):
        u, v = [i for i in range(3) if i != ax]
        nu = max(2, int(round(size[u] / spacing)) + 1)
        nv = max(2, int(round(size[v] / spacing)) + 1)
        gu, gv = np.meshgrid(np.linspace(-half[u], half[u], nu), np.linspace(-half[v], half[v], nv))
        for sign in (-1.0, 1.0):
            p = np.zeros((gu.size, 3))
            p[:, u] = gu.ravel()
            p[:, v] = gv.ravel()
            p[:, ax] = sign * half[ax]
            n = np.zeros_like(p)
            n[:, ax] = sign
            pts.append(p)
            nrm.append(n)
    pts = np.vstack(pts)
    nrm = np.vstack(nrm)
    pts, idx = np.unique(np.round(pts, 9), axis=0, return_index=True)
    return pts + center, nrm[idx]


def cylinder_points(radius, height, center=(0.0, 0.0, 0.0), spacing=0.005):
    """Side wall and both caps of a z-aligned cylinder."""
    n_theta = max(8, int(round(2 * PI * radius / spacing)))
    n_z = max(2, int(round(height / spacing)) + 1)
    th = np.linspace(0, 2 * PI, n_theta, endpoint=False)
    zz = np.linspace(-height / 2, height / 2, n_z)
    T, Z = np.meshgrid(th, zz)
    side = np.stack([radius * np.cos(T.ravel()), radius * np.sin(T.ravel()), Z.ravel()], axis=1)
    side_n = np.stack([np.cos(T.ravel()), np.sin(T.ravel()), np.zeros(T.size)], axis=1)
    caps, caps_n = [], []
    for ring in np.arange(spacing, radius - 0.5 * spacing, spacing):
        m = max(6, int(round(2 * PI * ring / spacing)))
        a = np.linspace(0, 2 * PI, m, endpoint=False)
        for sign in (-1.0, 1.0):
            caps.append(np.stack([ring * np.cos(a), ring * np.sin(a), np.full(m, sign * height / 2)], axis=1))
            caps_n.append(np.tile([0.0, 0.0, sign], (m, 1)))
    for sign in (-1.0, 1.0):
        caps.append([[0.0, 0.0, sign * height / 2]])
        caps_n.append([[0.0, 0.0, sign]])
    pts = np.vstack([side] + caps)
    nrm = np.vstack([side_n] + caps_n)
    return pts + np.asarray(center, dtype=float), nrm


def tiger_points():
    """Plush-toy stand-in: an ellipsoid narrow enough across x to grasp."""
    return ellipsoid_points((0.028, 0.06, 0.03), 1500)


def mug_points():
    body, body_n = cylinder_points(0.032, 0.09)
    handle, handle_n = box_points((0.012, 0.02, 0.05), center=(0.044, 0.0, 0.0))
    keep = handle[:, 0] > 0.0385
    return np.vstack([body, handle[keep]]), np.vstack([body_n, handle_n[keep]])


def package_points():
    """Wide box with a handle block on each side, one per hand."""
    body, body_n = box_points((0.14, 0.30, 0.08))
    parts, normals = [body], [body_n]
    for sign in (-1.0, 1.0):
        h, hn = box_points((0.03, 0.04, 0.03), center=(0.0, sign * 0.17, 0.01))
        keep = sign * h[:, 1] > 0.1505
        parts.append(h[keep])
        normals.append(hn[keep])
    return np.vstack(parts), np.vstack(normals)


def drawer_handle_points():
    return box_points((0.02, 0.12, 0.02), spacing=0.004)


# -- demo tracks -----------------------------------------------------------------


def min_jerk(s):
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10 - 15 * s + 6 * s * s)


def _timestamps(duration, fps=30.0, jitter=0.2, seed=0):
    """Camera-like timestamps with small deterministic jitter."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * fps)) + 1
    t = np.arange(n) / fps
    t[1:-1] += rng.uniform(-jitter, jitter, n - 2) / fps
    return t


def _profile_track(part_id, times, t_move, t_stop, fn):
    """Track that holds still, moves with ``fn(s)`` for s in [0, 1], then holds."""
    s = min_jerk((times - t_move) / (t_stop - t_move))
    pos, quats = zip(*(fn(si) for si in s))
    return PartTrajectory(part_id, times, np.array(pos), np.array(quats))


def tiger_track():
    """Pick and lift with a small yaw while lifting."""
    t = _timestamps(3.0, seed=1)
    p0 = np.array([0.5, 0.0, 0.03])
    lift = np.array([0.0, 0.05, 0.15])

    def fn(s):
        return p0 + s * lift + np.array([0.0, 0.0, 0.03 * math.sin(PI * s)]), quat_from_rpy(0.0, 0.0, 0.3 * s)

    return _profile_track("tiger", t, 0.5, 2.5, fn)


MUG_GOAL = Pose([0.55, -0.2, 0.165], [1.0, 0.0, 0.0, 0.0])


def mug_track():
    """Carry the mug from the table onto the coffee maker's platform."""
    t = _timestamps(3.2, seed=2)
    p0 = np.array([0.45, 0.15, 0.045])
    p1 = MUG_GOAL.position

    def fn(s):
        p = p0 + s * (p1 - p0)
        p[2] += 0.08 * math.sin(PI * s)
        return p, quat_from_rpy(0.15 * math.sin(PI * s), 0.0, 0.0)

    return _profile_track("mug", t, 0.5, 2.7, fn)


def package_track():
    t = _timestamps(3.0, seed=3)
    p0 = np.array([0.5, 0.0, 0.04])

    def fn(s):
        return p0 + np.array([0.0, 0.0, 0.15 * s]), np.array([1.0, 0.0, 0.0, 0.0])

    return _profile_track("package", t, 0.5, 2.5, fn)


def drawer_track():
    """Handle motion of a drawer being opened along -x (forward in time)."""
    t = _timestamps(2.6, seed=4)
    p0 = np.array([0.70, 0.0, 0.22])

    def fn(s):
        return p0 + np.array([-0.15 * s, 0.0, 0.0]), np.array([1.0, 0.0, 0.0, 0.0])

    return _profile_track("handle", t, 0.4, 2.2, fn)


def hand_track_for(traj: PartTrajectory, contact_local, hand_id, spread=0.015):
    """Fingertips pinching ``contact_local`` (part frame) along ``traj``."""
    times = traj.times
    idx, thumb = [], []
    for i in range(len(times)):
        pose = traj.pose(i)
        c = pose.apply(np.asarray(contact_local, dtype=float))
        x = pose.rotation[:, 0]
        idx.append(c + spread * x)
        thumb.append(c - spread * x)
    return HandTrack(hand_id, times, idx, thumb)


# -- task directories ------------------------------------------------------------

_CAMERAS = """
[[cameras]]
name = "front"
pose = [1.2, 0.0, 0.6, 0.0, 0.3826834, 0.0, -0.9238795]
intrinsics = {fx = 600.0, fy = 600.0, cx = 320.0, cy = 240.0}

[[cameras]]
name = "wrist_side"
pose = [0.5, -0.8, 0.5, 0.7071068, -0.5, 0.0, 0.0]
intrinsics = {fx = 500.0, fy = 500.0, cx = 320.0, cy = 240.0}
"""

TASKS = ("tiger", "mug", "package", "drawer")


def _q0_table(q):
    return "{ " + ", ".join(f"{k} = {v!r}" for k, v in q.items()) + " }"


def _write_common(root: Path, urdf_text, urdf_name):
    (root / "robot").mkdir(parents=True, exist_ok=True)
    (root / "assets").mkdir(exist_ok=True)
    (root / "demo").mkdir(exist_ok=True)
    (root / "robot" / urdf_name).write_text(urdf_text)


def write_task(kind, root, n_demos=100, seed=0):
    """Write a complete task directory for ``kind`` in :data:`TASKS`; returns the TOML path."""
    root = Path(root)
    if kind not in TASKS:
        raise ValueError(f"unknown sample task {kind!r}; choose from {TASKS}")
    if kind == "package":
        _write_common(root, bimanual_urdf(), "twin_arm7.urdf")
    else:
        _write_common(root, arm7_urdf(), "arm7.urdf")

    if kind == "tiger":
        tr = tiger_track()
        save_trajectory(root / "demo" / "tiger.json", tr)
        write_ply(root / "assets" / "tiger.ply", tiger_points()[0], binary=True)
        save_hand_track(root / "demo" / "hands.json", [hand_track_for(tr, (0.0, 0.0, 0.0), "right")])
        body = f"""name = "pick_tiger"
goal = "single_object"
n_demos = {n_demos}
seed = {seed}

[robot]
urdf = "robot/arm7.urdf"
q0 = {_q0_table(arm7_home())}

[[arms]]
ee_frame = "tcp"
gripper_joint = "finger_joint1"
hand_track = "demo/hands.json"
hand = "right"

[[assets]]
part_id = "tiger"
points = "assets/tiger.ply"
mesh = "meshes/tiger.obj"
rest_z = 0.03
trajectory = "demo/tiger.json"

[randomization.workspace]
aabb_min = [0.35, -0.2, 0.0]
aabb_max = [0.6, 0.2, 0.3]
yaw_range_deg = [-60.0, 60.0]
"""
    elif kind == "mug":
        tr = mug_track()
        save_trajectory(root / "demo" / "mug.json", tr)
        write_ply(root / "assets" / "mug.ply", mug_points()[0])
        save_hand_track(root / "demo" / "hands.json", [hand_track_for(tr, (0.0, 0.0, 0.02), "right")])
        body = f"""name = "mug_to_coffee_maker"
goal = "object_to_goal"
n_demos = {n_demos}
seed = {seed}

[robot]
urdf = "robot/arm7.urdf"
q0 = {_q0_table(arm7_home())}

[[arms]]
ee_frame = "tcp"
gripper_joint = "finger_joint1"
hand_track = "demo/hands.json"

[[assets]]
part_id = "mug"
points = "assets/mug.ply"
mesh = "meshes/mug.obj"
rest_z = 0.045
trajectory = "demo/mug.json"

[[assets]]
part_id = "coffee_maker"
mesh = "meshes/coffee_maker.obj"
pose = [0.62, -0.2, 0.06, 1.0, 0.0, 0.0, 0.0]

[randomization]
d_min = 0.15
occupied = [{{center = [0.66, -0.2], radius = 0.05}}]

[randomization.workspace]
aabb_min = [0.35, -0.05, 0.0]
aabb_max = [0.6, 0.3, 0.3]
yaw_range_deg = [-45.0, 45.0]
"""
    elif kind == "package":
        tr = package_track()
        save_trajectory(root / "demo" / "package.json", tr)
        write_ply(root / "assets" / "package.ply", package_points()[0], binary=True)
        save_hand_track(root / "demo" / "hands.json",
                        [hand_track_for(tr, (0.0, 0.17, 0.01), "left"),
                         hand_track_for(tr, (0.0, -0.17, 0.01), "right")])
        q0 = {**arm7_home("right_"), **arm7_home("left_")}
        body = f"""name = "lift_package"
goal = "bimanual"
n_demos = {n_demos}
seed = {seed}

[robot]
urdf = "robot/twin_arm7.urdf"
base_pose = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
q0 = {_q0_table(q0)}

[[arms]]
ee_frame = "right_tcp"
gripper_joint = "right_finger_joint1"
hand_track = "demo/hands.json"
hand = "right"

[[arms]]
ee_frame = "left_tcp"
gripper_joint = "left_finger_joint1"
hand_track = "demo/hands.json"
hand = "left"

[[assets]]
part_id = "package"
points = "assets/package.ply"
mesh = "meshes/package.obj"
rest_z = 0.04
trajectory = "demo/package.json"

[grasp]
n_samples = 400

[randomization.workspace]
aabb_min = [0.45, -0.05, 0.0]
aabb_max = [0.55, 0.05, 0.3]
yaw_range_deg = [-10.0, 10.0]
"""
    else:
        tr = drawer_track()
        # the demo was filmed closing the drawer; the task flips it back
        save_trajectory(root / "demo" / "handle.json", tr.reversed())
        write_ply(root / "assets" / "handle.ply", drawer_handle_points()[0])
        body = f"""name = "open_drawer"
goal = "articulated"
n_demos = {n_demos}
seed = {seed}
reverse_demo = true

[robot]
urdf = "robot/arm7.urdf"
q0 = {_q0_table(arm7_home())}

[[arms]]
ee_frame = "tcp"
gripper_joint = "finger_joint1"

[[assets]]
part_id = "handle"
points = "assets/handle.ply"
mesh = "meshes/drawer_handle.obj"
trajectory = "demo/handle.json"

[grasp]
approach_dir = [1.0, 0.0, 0.0]

[articulation]
part_id = "handle"
type = "prismatic"
axis = [1.0, 0.0, 0.0]
origin = [0.70, 0.0, 0.22]
offset_range = [-0.03, 0.03]
"""
    path = root / "task.toml"
    path.write_text(body + _CAMERAS)
    return path
