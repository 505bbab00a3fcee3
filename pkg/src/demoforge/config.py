"""Task configuration: TOML file -> validated :class:`TaskSpec`.

Every key has a default listed in :data:`DEFAULTS_TOML` (printed by
``demoforge validate --print-defaults``). Paths are resolved relative to the
task file. Angles in the file are degrees where the key says so; everything
inside the package is radians.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli

from .diffik import SolverConfig
from .errors import InvariantViolation, MissingAsset, ParseError, UrdfError
from .geom import Pose
from .grasp import GripperSpec
from .io import load_hand_tracks, load_points, load_trajectory
from .randomize import RandomizationConfig
from .retarget import Workspace
from .urdfkin import load_urdf

GOALS = ("single_object", "object_to_goal", "articulated", "bimanual")

DEFAULTS_TOML = """\
# demoforge task defaults. Any key may be overridden in a task file.
name = "task"
goal = "single_object"        # single_object | object_to_goal | articulated | bimanual
n_demos = 100                 # successful demos to produce
seed = 0                      # master seed for all randomization
interpolate = true            # false: replay the demo object track unchanged
reverse_demo = false          # demo video was recorded in reverse
min_success_rate = 0.0        # generate exits with code 3 below this
max_attempt_factor = 3.0      # give up after n_demos * factor attempts

[robot]
urdf = ""                     # required
base_pose = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]   # x y z qw qx qy qz, table frame
q0 = {}                       # joint name -> nominal start value; others default to 0 clipped

# [[arms]]
# ee_frame = "tcp"            # required, link name of the tool center point
# gripper_joint = ""          # optional, driven by the gripper schedule
# hand_track = ""             # optional JSON hand-keypoint file
# hand = "right"              # which hand in hand_track drives this arm
# part = ""                   # optional explicit grasped part

# [[assets]]
# part_id = "obj"             # required
# points = ""                 # PLY/OBJ point set (required for grasped parts)
# mesh = ""                   # opaque render-mesh reference
# rest_z = 0.0                # height of the part frame above the table when resting
# trajectory = ""             # demo part trajectory JSON (moving parts)
# pose = [...]                # fixed pose for static parts

# [[cameras]]
# name = "front"
# pose = [x, y, z, qw, qx, qy, qz]
# intrinsics = {fx = 600.0, fy = 600.0, cx = 320.0, cy = 240.0}

# [articulation]              # goal = "articulated" only
# part_id = ""
# type = "prismatic"          # prismatic | revolute
# axis = [1.0, 0.0, 0.0]
# origin = [0.0, 0.0, 0.0]
# offset_range = [-0.03, 0.03]   # m or rad added to the initial joint value

[randomization]
cam_trans_max = 0.02          # m
cam_rot_max_deg = 5.0
light_count = [1, 3]
light_intensity = [500.0, 1500.0]
light_color_temp = [2700.0, 6500.0]   # K
light_pos_min = [-1.0, -1.0, 1.0]
light_pos_max = [1.0, 1.0, 2.0]
d_min = 0.1                   # m, min horizontal start-goal distance (object_to_goal)
max_tries = 1000
q0_perturb = 0.05             # rad, uniform per arm joint
occupied = []                 # [{center = [x, y], radius = r}, ...]

[randomization.workspace]
aabb_min = [0.3, -0.3, 0.0]
aabb_max = [0.7, 0.3, 0.3]
table_height = 0.0
yaw_range_deg = [-180.0, 180.0]

[gripper]
max_opening = 0.08
min_opening = 0.0
finger_depth = 0.04
tcp_from_grasp = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]

[grasp]
mu = 0.5
n_samples = 64
normal_k = 12
voxel = 0.004
smoothing_iters = 1
approach_dir = [0.0, 0.0, -1.0]   # preferred gripper approach direction, world frame
max_approach_tilt_deg = 45.0  # max angle between the approach axis and approach_dir
hand_keep_fraction = 0.3      # candidates kept nearest the demonstrated hand
max_retries = 3

[phases]
v_eps = 0.02                  # m/s, motion threshold for the grasp window
pad = 2                       # frames
standoff = 0.08
approach_duration = 0.6
reach_duration = 1.0
close_duration = 0.2
retreat = 0.08
retreat_duration = 0.4

[solver]
damping = 0.01
w_smooth = 0.001
pos_tol = 0.001
rot_tol = 0.0087
max_iters = 64
fps = 15.0
limit_margin = 0.05
w_limit = 1.0

[render]
image_size = [640, 480]
"""

DEFAULTS = tomli.loads(DEFAULTS_TOML)

_ARM_KEYS = {"ee_frame", "gripper_joint", "hand_track", "hand", "part"}
_ASSET_KEYS = {"part_id", "points", "mesh", "rest_z", "trajectory", "pose"}
_CAMERA_KEYS = {"name", "pose", "intrinsics"}
_ARTIC_KEYS = {"part_id", "type", "axis", "origin", "offset_range"}


@dataclass
class ArmSpec:
    ee_frame: str
    gripper_joint: str | None = None
    hand_track: Path | None = None
    hand: str = "right"
    part: str | None = None


@dataclass
class AssetSpec:
    part_id: str
    points: Path | None = None
    mesh: str = ""
    rest_z: float = 0.0
    trajectory: Path | None = None
    pose: Pose | None = None


@dataclass
class Articulation:
    part_id: str
    type: str
    axis: np.ndarray
    origin: np.ndarray
    offset_range: tuple


@dataclass
class GraspParams:
    mu: float
    n_samples: int
    normal_k: int
    voxel: float
    smoothing_iters: int
    max_approach_tilt_deg: float
    approach_dir: np.ndarray
    hand_keep_fraction: float
    max_retries: int


@dataclass
class PhaseParams:
    v_eps: float
    pad: int
    standoff: float
    approach_duration: float
    reach_duration: float
    close_duration: float
    retreat: float
    retreat_duration: float


@dataclass(eq=False)
class TaskSpec:
    name: str
    path: Path | None
    goal: str
    n_demos: int
    seed: int
    interpolate: bool
    reverse_demo: bool
    min_success_rate: float
    max_attempt_factor: float
    urdf: Path
    model: object
    base_pose: Pose
    q0: np.ndarray
    arms: list
    assets: list
    cameras: dict
    intrinsics: dict
    articulation: Articulation | None
    randomization: RandomizationConfig
    occupied: list
    gripper: GripperSpec
    grasp: GraspParams
    phases: PhaseParams
    solver: SolverConfig
    image_size: tuple
    trajectories: dict = field(default_factory=dict)
    hand_tracks: dict = field(default_factory=dict)
    resolved: dict = field(default_factory=dict)

    def asset(self, part_id) -> AssetSpec:
        for a in self.assets:
            if a.part_id == part_id:
                return a
        raise KeyError(part_id)

    def with_overrides(self, **kw):
        """Copy with top-level fields replaced (``n_demos``, ``seed``, ``interpolate``)."""
        spec = replace(self, **kw)
        spec.resolved = copy.deepcopy(self.resolved)
        for k, v in kw.items():
            if k in spec.resolved:
                spec.resolved[k] = v
        if "seed" in kw:
            spec.randomization = replace(self.randomization, master_seed=int(kw["seed"]))
        return spec

    @property
    def cache_key(self):
        return json.dumps(self.resolved, sort_keys=True, default=str)


def _merge(defaults, user, path=""):
    out = copy.deepcopy(defaults)
    for k, v in user.items():
        where = f"{path}{k}"
        if k not in defaults:
            raise ParseError(f"unknown field {where!r}")
        if isinstance(defaults[k], dict) and defaults[k] and k != "q0":
            if not isinstance(v, dict):
                raise ParseError(f"field {where!r} must be a table")
            out[k] = _merge(defaults[k], v, where + ".")
        else:
            out[k] = v
    return out


def _num(d, key, where, kind=float):
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"field {where}{key!r} must be a number, got {v!r}")
    if kind is int:
        if float(v) != int(v):
            raise ParseError(f"field {where}{key!r} must be an integer, got {v!r}")
        return int(v)
    return float(v)


def _vec(v, n, where):
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"field {where!r} must be a list of {n} numbers") from exc
    if arr.shape != (n,):
        raise ParseError(f"field {where!r} must be a list of {n} numbers, got {v!r}")
    return arr


def _pose(v, where):
    arr = _vec(v, 7, where)
    if np.linalg.norm(arr[3:]) < 1e-9:
        raise InvariantViolation(f"field {where!r}: zero quaternion")
    return Pose.from_array(arr)


def _file(base, rel, where, required=True):
    if not rel:
        if required:
            raise ParseError(f"field {where!r} is required")
        return None
    p = Path(rel)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        raise MissingAsset(f"{where}: file not found: {p}")
    return p


def _table_list(raw, key, allowed):
    items = raw.get(key, [])
    if not isinstance(items, list):
        raise ParseError(f"field {key!r} must be an array of tables")
    for i, it in enumerate(items):
        if not isinstance(it, dict):
            raise ParseError(f"{key}[{i}] must be a table")
        bad = set(it) - allowed
        if bad:
            raise ParseError(f"unknown field(s) {sorted(bad)} in {key}[{i}]")
    return items


def load_task_config(path) -> TaskSpec:
    """Read, default-fill and validate a task file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise MissingAsset(f"cannot read task file {path}: {exc}") from exc
    return parse_task_config(text, base_dir=path.parent, path=path)


def parse_task_config(text, base_dir=".", path=None) -> TaskSpec:
    base = Path(base_dir)
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(f"{path or '<task>'}: {exc}") from exc

    arms_raw = _table_list(raw, "arms", _ARM_KEYS)
    assets_raw = _table_list(raw, "assets", _ASSET_KEYS)
    cams_raw = _table_list(raw, "cameras", _CAMERA_KEYS)
    artic_raw = raw.get("articulation")
    if artic_raw is not None:
        bad = set(artic_raw) - _ARTIC_KEYS
        if bad:
            raise ParseError(f"unknown field(s) {sorted(bad)} in articulation")
    rest = {k: v for k, v in raw.items() if k not in ("arms", "assets", "cameras", "articulation")}
    cfg = _merge(DEFAULTS, rest)

    goal = cfg["goal"]
    if goal not in GOALS:
        raise ParseError(f"field 'goal' must be one of {GOALS}, got {goal!r}")
    n_demos = _num(cfg, "n_demos", "", int)
    if n_demos < 0:
        raise InvariantViolation("n_demos must be >= 0")

    # robot
    rcfg = cfg["robot"]
    urdf = _file(base, rcfg["urdf"], "robot.urdf")
    try:
        model = load_urdf(urdf)
    except UrdfError as exc:
        raise InvariantViolation(f"robot.urdf {urdf}: {exc.reason}: {exc}") from exc
    base_pose = _pose(rcfg["base_pose"], "robot.base_pose")
    if not isinstance(rcfg["q0"], dict):
        raise ParseError("field 'robot.q0' must be a table of joint values")
    q0 = model.home()
    for jn, v in rcfg["q0"].items():
        if jn not in model.actuated:
            raise InvariantViolation(f"robot.q0: unknown actuated joint {jn!r}")
        q0[model.joint_index(jn)] = float(v)
    if not model.within_limits(q0):
        raise InvariantViolation("robot.q0 lies outside the joint limits")

    # arms
    if not arms_raw:
        raise InvariantViolation("at least one [[arms]] entry is required")
    arms = []
    for i, a in enumerate(arms_raw):
        if "ee_frame" not in a:
            raise ParseError(f"arms[{i}].ee_frame is required")
        if a["ee_frame"] not in model.links:
            raise InvariantViolation(f"arms[{i}].ee_frame {a['ee_frame']!r} is not a link of the robot")
        gj = a.get("gripper_joint") or None
        if gj is not None and gj not in model.actuated:
            raise InvariantViolation(f"arms[{i}].gripper_joint {gj!r} is not an actuated joint")
        hand = a.get("hand", "right")
        if hand not in ("left", "right"):
            raise ParseError(f"arms[{i}].hand must be 'left' or 'right'")
        arms.append(ArmSpec(a["ee_frame"], gj, _file(base, a.get("hand_track"), f"arms[{i}].hand_track", False),
                            hand, a.get("part") or None))
    if len({a.ee_frame for a in arms}) != len(arms):
        raise InvariantViolation("arms must use distinct ee_frame links")

    # assets
    assets = []
    trajectories = {}
    for i, a in enumerate(assets_raw):
        if "part_id" not in a:
            raise ParseError(f"assets[{i}].part_id is required")
        pid = a["part_id"]
        traj_path = _file(base, a.get("trajectory"), f"assets[{i}].trajectory", False)
        pose = _pose(a["pose"], f"assets[{i}].pose") if "pose" in a else None
        if traj_path is None and pose is None:
            raise InvariantViolation(f"asset {pid!r} needs a trajectory or a fixed pose")
        asset = AssetSpec(pid, _file(base, a.get("points"), f"assets[{i}].points", False),
                          str(a.get("mesh", "")), float(a.get("rest_z", 0.0)), traj_path, pose)
        if traj_path is not None:
            try:
                traj = load_trajectory(traj_path)
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                raise ParseError(f"assets[{i}].trajectory {traj_path}: {exc}") from exc
            if len(traj) < 3:
                raise InvariantViolation(f"trajectory of {pid!r} needs at least 3 waypoints")
            trajectories[pid] = traj.reversed() if cfg["reverse_demo"] else traj
        if asset.points is not None:
            try:
                load_points(asset.points)
            except ValueError as exc:
                raise ParseError(f"assets[{i}].points {asset.points}: {exc}") from exc
        assets.append(asset)
    ids = [a.part_id for a in assets]
    if len(set(ids)) != len(ids):
        raise InvariantViolation("duplicate asset part_id")
    if not trajectories:
        raise InvariantViolation("no asset carries a demo trajectory")

    hand_tracks = {}
    for i, arm in enumerate(arms):
        if arm.hand_track is None:
            continue
        try:
            tracks = load_hand_tracks(arm.hand_track)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise ParseError(f"arms[{i}].hand_track {arm.hand_track}: {exc}") from exc
        if arm.hand not in tracks:
            raise InvariantViolation(f"arms[{i}].hand_track has no {arm.hand!r} hand")
        tr = tracks[arm.hand]
        if cfg["reverse_demo"]:
            t = tr.times[0] + tr.times[-1] - tr.times[::-1]
            tr = type(tr)(tr.hand_id, t, tr.index_tip[::-1], tr.thumb_tip[::-1])
        hand_tracks[arm.ee_frame] = tr

    for arm in arms:
        if arm.part is not None and arm.part not in trajectories:
            raise InvariantViolation(f"arm {arm.ee_frame!r}: part {arm.part!r} has no trajectory")
        if arm.part is None and arm.ee_frame not in hand_tracks and len(trajectories) > 1:
            raise InvariantViolation(
                f"arm {arm.ee_frame!r}: several moving parts; give 'part' or a hand_track")

    if goal == "bimanual":
        if len(arms) != 2:
            raise InvariantViolation("bimanual tasks need exactly two arms")
        if len(hand_tracks) != len(arms):
            raise InvariantViolation(
                f"bimanual task has {len(arms)} arms but {len(hand_tracks)} hand tracks")

    articulation = None
    if goal == "articulated":
        if artic_raw is None:
            raise InvariantViolation("goal 'articulated' needs an [articulation] table")
        jt = artic_raw.get("type", "prismatic")
        if jt not in ("prismatic", "revolute"):
            raise ParseError("articulation.type must be 'prismatic' or 'revolute'")
        axis = _vec(artic_raw.get("axis", [1, 0, 0]), 3, "articulation.axis")
        if np.linalg.norm(axis) == 0:
            raise InvariantViolation("articulation.axis must be non-zero")
        rng = tuple(float(v) for v in _vec(artic_raw.get("offset_range", [0, 0]), 2, "articulation.offset_range"))
        if rng[0] > rng[1]:
            raise InvariantViolation("articulation.offset_range lo > hi")
        pid = artic_raw.get("part_id", "")
        if pid not in trajectories:
            raise InvariantViolation(f"articulation.part_id {pid!r} has no trajectory")
        articulation = Articulation(pid, jt, axis / np.linalg.norm(axis),
                                    _vec(artic_raw.get("origin", [0, 0, 0]), 3, "articulation.origin"), rng)

    cameras, intrinsics = {}, {}
    for i, c in enumerate(cams_raw):
        if "name" not in c or "pose" not in c:
            raise ParseError(f"cameras[{i}] needs name and pose")
        cameras[c["name"]] = _pose(c["pose"], f"cameras[{i}].pose")
        intrinsics[c["name"]] = dict(c.get("intrinsics", {}))

    # randomization
    rz = cfg["randomization"]
    ws = rz["workspace"]
    try:
        workspace = Workspace(_vec(ws["aabb_min"], 3, "workspace.aabb_min"),
                              _vec(ws["aabb_max"], 3, "workspace.aabb_max"),
                              _num(ws, "table_height", "workspace."),
                              tuple(math.radians(v) for v in _vec(ws["yaw_range_deg"], 2, "workspace.yaw_range_deg")))
        rand = RandomizationConfig(
            cam_trans_max=_num(rz, "cam_trans_max", "randomization."),
            cam_rot_max=math.radians(_num(rz, "cam_rot_max_deg", "randomization.")),
            light_count=tuple(rz["light_count"]),
            light_intensity=tuple(rz["light_intensity"]),
            light_color_temp=tuple(rz["light_color_temp"]),
            light_pos_min=tuple(_vec(rz["light_pos_min"], 3, "light_pos_min")),
            light_pos_max=tuple(_vec(rz["light_pos_max"], 3, "light_pos_max")),
            workspace=workspace,
            d_min=_num(rz, "d_min", "randomization."),
            max_tries=_num(rz, "max_tries", "randomization.", int),
            q0_perturb=_num(rz, "q0_perturb", "randomization."),
            master_seed=_num(cfg, "seed", "", int),
        )
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise InvariantViolation(f"randomization: {exc}") from exc
    occupied = []
    for i, o in enumerate(rz["occupied"]):
        c = _vec(o.get("center"), 2, f"randomization.occupied[{i}].center")
        occupied.append((Pose.from_translation([c[0], c[1], 0.0]), float(o.get("radius", 0.0))))

    g = cfg["gripper"]
    try:
        gripper = GripperSpec(_num(g, "max_opening", "gripper."), _num(g, "min_opening", "gripper."),
                              _num(g, "finger_depth", "gripper."), _pose(g["tcp_from_grasp"], "gripper.tcp_from_grasp"))
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise InvariantViolation(f"gripper: {exc}") from exc

    gp = cfg["grasp"]
    grasp = GraspParams(_num(gp, "mu", "grasp."), _num(gp, "n_samples", "grasp.", int),
                        _num(gp, "normal_k", "grasp.", int), _num(gp, "voxel", "grasp."),
                        _num(gp, "smoothing_iters", "grasp.", int), _num(gp, "max_approach_tilt_deg", "grasp."),
                        _vec(gp["approach_dir"], 3, "grasp.approach_dir"),
                        _num(gp, "hand_keep_fraction", "grasp."), _num(gp, "max_retries", "grasp.", int))
    if np.linalg.norm(grasp.approach_dir) == 0:
        raise InvariantViolation("grasp.approach_dir must be non-zero")
    grasp.approach_dir = grasp.approach_dir / np.linalg.norm(grasp.approach_dir)
    if grasp.mu <= 0 or grasp.n_samples < 1 or not 0 < grasp.hand_keep_fraction <= 1:
        raise InvariantViolation("grasp: mu > 0, n_samples >= 1 and 0 < hand_keep_fraction <= 1 required")
    for arm in arms:
        parts = [arm.part] if arm.part else list(trajectories)
        for pid in parts:
            if next(a for a in assets if a.part_id == pid).points is None:
                raise InvariantViolation(f"part {pid!r} may be grasped but has no point set")

    ph = cfg["phases"]
    phases = PhaseParams(_num(ph, "v_eps", "phases."), _num(ph, "pad", "phases.", int),
                         *(_num(ph, k, "phases.") for k in ("standoff", "approach_duration", "reach_duration",
                                                            "close_duration", "retreat", "retreat_duration")))
    s = cfg["solver"]
    try:
        solver = SolverConfig(_num(s, "damping", "solver."), _num(s, "w_smooth", "solver."),
                              _num(s, "pos_tol", "solver."), _num(s, "rot_tol", "solver."),
                              _num(s, "max_iters", "solver.", int), 1.0 / _num(s, "fps", "solver."),
                              _num(s, "limit_margin", "solver."), _num(s, "w_limit", "solver."))
    except (ValueError, ZeroDivisionError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise InvariantViolation(f"solver: {exc}") from exc

    resolved = copy.deepcopy(cfg)
    resolved["arms"] = arms_raw
    resolved["assets"] = assets_raw
    resolved["cameras"] = cams_raw
    if artic_raw is not None:
        resolved["articulation"] = artic_raw

    return TaskSpec(
        name=str(cfg["name"]), path=Path(path) if path else None, goal=goal, n_demos=n_demos,
        seed=_num(cfg, "seed", "", int), interpolate=bool(cfg["interpolate"]),
        reverse_demo=bool(cfg["reverse_demo"]), min_success_rate=_num(cfg, "min_success_rate", ""),
        max_attempt_factor=_num(cfg, "max_attempt_factor", ""), urdf=urdf, model=model, base_pose=base_pose,
        q0=q0, arms=arms, assets=assets, cameras=cameras, intrinsics=intrinsics, articulation=articulation,
        randomization=rand, occupied=occupied, gripper=gripper, grasp=grasp, phases=phases, solver=solver,
        image_size=tuple(int(v) for v in cfg["render"]["image_size"]), trajectories=trajectories,
        hand_tracks=hand_tracks, resolved=resolved,
    )
