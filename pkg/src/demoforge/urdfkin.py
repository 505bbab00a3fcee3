"""URDF parsing, forward kinematics and geometric Jacobians.

Only the kinematic subset of URDF is retained: links, joints (revolute,
continuous, prismatic, fixed), origins, axes, limits and mimic couplings.
Visual mesh filenames are kept as opaque asset strings. Everything else
(collision, inertial, transmission, gazebo, ...) is dropped with a warning.
"""

from __future__ import annotations

import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    JointLimitViolation,
    KinematicLoop,
    MalformedXml,
    MissingLimit,
    UnknownFrame,
    UnsupportedJointType,
)
from .geom import Pose, quat_from_rpy, quat_to_matrix

logger = logging.getLogger(__name__)

ACTUATED_TYPES = ("revolute", "continuous", "prismatic")
SUPPORTED_TYPES = ACTUATED_TYPES + ("fixed",)
CONTINUOUS_LIMIT = 4.0 * math.pi
LIMIT_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class Joint:
    name: str
    type: str
    parent: str
    child: str
    xyz: tuple = (0.0, 0.0, 0.0)
    rpy: tuple = (0.0, 0.0, 0.0)
    axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    lower: float = 0.0
    upper: float = 0.0
    velocity: float = math.inf
    effort: float | None = None
    mimic: tuple | None = None  # (source joint, multiplier, offset)

    @property
    def origin(self) -> Pose:
        return Pose(self.xyz, quat_from_rpy(*self.rpy))

    @property
    def actuated(self):
        return self.type in ACTUATED_TYPES and self.mimic is None


def _floats(text, n, default):
    if text is None:
        return tuple(default)
    try:
        vals = tuple(float(v) for v in text.split())
    except ValueError as exc:
        raise MalformedXml(f"cannot parse numbers from {text!r}") from exc
    if len(vals) != n:
        raise MalformedXml(f"expected {n} numbers, got {text!r}")
    return vals


def _opt_float(el, attr, default):
    val = el.get(attr)
    if val is None:
        return default
    try:
        return float(val)
    except ValueError as exc:
        raise MalformedXml(f"bad {attr}={val!r}") from exc


_IGNORED_LINK_TAGS = ("collision", "inertial")


def parse_urdf(document: str) -> "KinematicModel":
    """Parse URDF XML text into a :class:`KinematicModel`."""
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    if root.tag != "robot":
        raise MalformedXml(f"root element must be <robot>, got <{root.tag}>")

    warnings = []
    links = []
    assets = []
    for link in root.findall("link"):
        name = link.get("name")
        if not name:
            raise MalformedXml("<link> without name")
        links.append(name)
        for tag in _IGNORED_LINK_TAGS:
            if link.find(tag) is not None:
                warnings.append(f"ignored <{tag}> in link {name!r}")
        for visual in link.findall("visual"):
            mesh = visual.find("geometry/mesh")
            if mesh is not None and mesh.get("filename"):
                assets.append((name, mesh.get("filename")))
    for child in root:
        if child.tag not in ("link", "joint"):
            warnings.append(f"ignored <{child.tag}>")
    if len(set(links)) != len(links):
        raise MalformedXml("duplicate link names")

    joints = []
    for el in root.findall("joint"):
        name = el.get("name")
        jtype = el.get("type")
        if not name or not jtype:
            raise MalformedXml("<joint> requires name and type")
        if jtype not in SUPPORTED_TYPES:
            raise UnsupportedJointType(f"joint {name!r} has unsupported type {jtype!r}")
        parent = el.find("parent")
        child = el.find("child")
        if parent is None or child is None:
            raise MalformedXml(f"joint {name!r} needs <parent> and <child>")
        origin = el.find("origin")
        xyz = _floats(origin.get("xyz") if origin is not None else None, 3, (0, 0, 0))
        rpy = _floats(origin.get("rpy") if origin is not None else None, 3, (0, 0, 0))
        axis_el = el.find("axis")
        axis = np.array(_floats(axis_el.get("xyz") if axis_el is not None else None, 3, (1, 0, 0)))
        norm = np.linalg.norm(axis)
        if jtype != "fixed" and norm == 0.0:
            raise MalformedXml(f"joint {name!r} has a zero axis")
        axis = axis / norm if norm > 0 else np.array([1.0, 0.0, 0.0])

        lower = upper = 0.0
        velocity = math.inf
        effort = None
        limit = el.find("limit")
        if jtype in ("revolute", "prismatic"):
            if limit is None:
                raise MissingLimit(f"joint {name!r} ({jtype}) has no <limit>")
            lower = _opt_float(limit, "lower", 0.0)
            upper = _opt_float(limit, "upper", 0.0)
            if lower > upper:
                raise MalformedXml(f"joint {name!r}: lower limit exceeds upper")
        elif jtype == "continuous":
            lower, upper = -CONTINUOUS_LIMIT, CONTINUOUS_LIMIT
        if limit is not None and jtype != "fixed":
            velocity = _opt_float(limit, "velocity", math.inf)
            effort = _opt_float(limit, "effort", None)

        mimic = None
        mimic_el = el.find("mimic")
        if mimic_el is not None and jtype != "fixed":
            src = mimic_el.get("joint")
            if not src:
                raise MalformedXml(f"joint {name!r}: <mimic> without joint")
            mimic = (src, _opt_float(mimic_el, "multiplier", 1.0), _opt_float(mimic_el, "offset", 0.0))

        joints.append(Joint(name, jtype, parent.get("link"), child.get("link"), xyz, rpy, axis,
                            lower, upper, velocity, effort, mimic))

    for msg in warnings:
        logger.debug("urdf: %s", msg)
    return KinematicModel(root.get("name", "robot"), links, joints, warnings=warnings, assets=assets)


def load_urdf(path) -> "KinematicModel":
    return parse_urdf(Path(path).read_text())


_EYE4 = np.eye(4)


class KinematicModel:
    """Immutable joint tree with FK and Jacobian evaluation.

    Joint configurations are 1-D arrays ordered like :attr:`actuated`
    (document order of non-mimic movable joints). Mimic joints follow their
    source joint linearly and do not appear in the configuration vector.
    """

    def __init__(self, name, links, joints, warnings=(), assets=()):
        self.name = name
        self.links = tuple(links)
        self.joints = tuple(joints)
        self.warnings = tuple(warnings)
        self.assets = tuple(assets)
        link_set = set(self.links)

        by_name = {}
        child_of = {}
        for j in self.joints:
            if j.name in by_name:
                raise MalformedXml(f"duplicate joint name {j.name!r}")
            by_name[j.name] = j
            for ln in (j.parent, j.child):
                if ln not in link_set:
                    raise MalformedXml(f"joint {j.name!r} references unknown link {ln!r}")
            if j.child in child_of:
                raise KinematicLoop(f"link {j.child!r} has two parent joints")
            child_of[j.child] = j
        roots = [ln for ln in self.links if ln not in child_of]
        if not roots:
            raise KinematicLoop("every link has a parent joint; no root")
        if len(roots) > 1:
            raise MalformedXml(f"multiple root links: {roots}")
        self.root = roots[0]

        children = {}
        for j in self.joints:
            children.setdefault(j.parent, []).append(j)
        order = []
        paths = {self.root: ()}
        stack = [self.root]
        while stack:
            ln = stack.pop()
            for j in reversed(children.get(ln, [])):
                if j.child in paths:
                    raise KinematicLoop(f"joint {j.name!r} closes a loop at {j.child!r}")
                paths[j.child] = paths[ln] + (j.name,)
                order.append(j)
                stack.append(j.child)
        if len(order) != len(self.joints):
            loose = sorted(set(by_name) - {j.name for j in order})
            raise KinematicLoop(f"joints not reachable from root {self.root!r}: {loose}")

        self._by_name = by_name
        self._order = tuple(order)
        self.actuated = tuple(j.name for j in self.joints if j.actuated)
        act_index = {n: i for i, n in enumerate(self.actuated)}
        for j in self.joints:
            if j.mimic is not None and j.mimic[0] not in act_index:
                raise MalformedXml(f"joint {j.name!r} mimics non-actuated joint {j.mimic[0]!r}")
        self._act_index = act_index
        self.lower = np.array([by_name[n].lower for n in self.actuated])
        self.upper = np.array([by_name[n].upper for n in self.actuated])
        self.velocity = np.array([by_name[n].velocity for n in self.actuated])

        # precomputed per-joint kinematic data, indexed by joint name
        self._kin = {}
        for j in self.joints:
            T = np.eye(4)
            T[:3, :3] = quat_to_matrix(quat_from_rpy(*j.rpy))
            T[:3, 3] = j.xyz
            K = np.zeros((4, 4))
            ax = j.axis
            K[:3, :3] = [[0, -ax[2], ax[1]], [ax[2], 0, -ax[0]], [-ax[1], ax[0], 0]]
            if j.mimic is not None:
                src, mult, off = act_index[j.mimic[0]], j.mimic[1], j.mimic[2]
            elif j.actuated:
                src, mult, off = act_index[j.name], 1.0, 0.0
            else:
                src, mult, off = -1, 0.0, 0.0
            kind = "prismatic" if j.type == "prismatic" else ("fixed" if j.type == "fixed" else "revolute")
            self._kin[j.name] = (kind, T, K, K @ K, ax.copy(), src, mult, off)
        self._paths = {ln: tuple(self._kin[n] for n in p) for ln, p in paths.items()}
        self._path_names = paths

    # -- introspection -----------------------------------------------------

    @property
    def n_dof(self):
        return len(self.actuated)

    def joint(self, name) -> Joint:
        return self._by_name[name]

    def joint_index(self, name) -> int:
        return self._act_index[name]

    def path_joints(self, frame):
        """Joint names on the root -> frame path."""
        self._check_frame(frame)
        return self._path_names[frame]

    def chain_dofs(self, frame):
        """Indices of actuated joints that move ``frame`` (mimic sources included)."""
        idx = []
        for kind, _T, _K, _K2, _ax, src, _m, _o in self._paths[self._check_frame(frame)]:
            if src >= 0 and src not in idx:
                idx.append(src)
        return np.array(sorted(idx), dtype=int)

    def home(self):
        """Zero configuration clipped into the limits."""
        return np.clip(np.zeros(self.n_dof), self.lower, self.upper)

    def clip(self, q):
        return np.clip(q, self.lower, self.upper)

    def within_limits(self, q, slack=LIMIT_SLACK):
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.lower - slack) and np.all(q <= self.upper + slack))

    def _check_frame(self, frame):
        if frame not in self._paths:
            raise UnknownFrame(f"unknown frame {frame!r}")
        return frame

    def _check_q(self, q, check_limits):
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n_dof,):
            raise DimensionMismatch(f"expected {self.n_dof} joint values, got shape {q.shape}")
        if check_limits and not self.within_limits(q):
            bad = [n for n, v, lo, hi in zip(self.actuated, q, self.lower, self.upper)
                   if v < lo - LIMIT_SLACK or v > hi + LIMIT_SLACK]
            raise JointLimitViolation(f"joint values outside limits: {bad}")
        return q

    # -- kinematics --------------------------------------------------------

    @staticmethod
    def _motion(entry, q):
        kind, T0, K, K2, ax, src, mult, off = entry
        if kind == "fixed":
            return T0
        v = mult * q[src] + off
        if kind == "prismatic":
            M = np.eye(4)
            M[:3, 3] = ax * v
        else:
            M = np.eye(4) + math.sin(v) * K + (1.0 - math.cos(v)) * K2
        return T0 @ M

    def forward_kinematics(self, q, check_limits=True):
        """Pose of every link in the root frame."""
        q = self._check_q(q, check_limits)
        T = {self.root: np.eye(4)}
        for j in self._order:
            T[j.child] = T[j.parent] @ self._motion(self._kin[j.name], q)
        return {ln: Pose.from_matrix(M) for ln, M in T.items()}

    def link_matrix(self, q, frame, check_limits=False):
        """Homogeneous 4x4 transform of ``frame`` in the root frame."""
        q = self._check_q(q, check_limits)
        T = np.eye(4)
        for entry in self._paths[self._check_frame(frame)]:
            T = T @ self._motion(entry, q)
        return T

    def link_pose(self, q, frame, check_limits=True) -> Pose:
        return Pose.from_matrix(self.link_matrix(q, frame, check_limits))

    def frame_jacobian(self, q, frame):
        """``(T, J)``: frame transform and 6 x n Jacobian from a single chain pass.

        No input validation; this is the solver's hot path.
        """
        n = self.n_dof
        T = np.eye(4)
        axes, origins, cols, mults, revolute = [], [], [], [], []
        for entry in self._paths[frame]:
            kind, T0, K, K2, ax, src, mult, off = entry
            T = T @ T0
            if kind == "fixed":
                continue
            axes.append(T[:3, :3] @ ax)
            origins.append(T[:3, 3].copy())
            cols.append(src)
            mults.append(mult)
            v = mult * q[src] + off
            if kind == "prismatic":
                revolute.append(False)
                T[:3, 3] += T[:3, :3] @ (ax * v)
            else:
                revolute.append(True)
                T = T @ (_EYE4 + math.sin(v) * K + (1.0 - math.cos(v)) * K2)
        J = np.zeros((6, n))
        if not axes:
            return T, J
        Z = np.array(axes)
        D = T[:3, 3] - np.array(origins)
        rev = np.array(revolute)[:, None]
        m = np.array(mults)[:, None]
        # z x (p_end - p) for revolute joints, z for prismatic ones
        lin = np.where(rev, Z[:, [1, 2, 0]] * D[:, [2, 0, 1]] - Z[:, [2, 0, 1]] * D[:, [1, 2, 0]], Z) * m
        ang = np.where(rev, Z, 0.0) * m
        cols = np.array(cols)
        if len(np.unique(cols)) == len(cols):
            J[:3, cols] = lin.T
            J[3:, cols] = ang.T
        else:
            np.add.at(J.T, (cols, slice(0, 3)), lin)
            np.add.at(J.T, (cols, slice(3, 6)), ang)
        return T, J

    def jacobian(self, q, frame, check_limits=False):
        """6 x n geometric Jacobian of ``frame`` (linear rows first, root-frame axes)."""
        q = self._check_q(q, check_limits)
        self._check_frame(frame)
        return self.frame_jacobian(q, frame)[1]

    # -- serialization -----------------------------------------------------

    def to_urdf(self) -> str:
        """Serialize the retained kinematic subset back to URDF text."""
        robot = ET.Element("robot", name=self.name)
        mesh_of = {}
        for ln, fname in self.assets:
            mesh_of.setdefault(ln, []).append(fname)
        for ln in self.links:
            el = ET.SubElement(robot, "link", name=ln)
            for fname in mesh_of.get(ln, []):
                geom = ET.SubElement(ET.SubElement(el, "visual"), "geometry")
                ET.SubElement(geom, "mesh", filename=fname)
        for j in self.joints:
            el = ET.SubElement(robot, "joint", name=j.name, type=j.type)
            ET.SubElement(el, "parent", link=j.parent)
            ET.SubElement(el, "child", link=j.child)
            ET.SubElement(el, "origin", xyz=_fmt(j.xyz), rpy=_fmt(j.rpy))
            if j.type != "fixed":
                ET.SubElement(el, "axis", xyz=_fmt(j.axis))
            if j.type in ("revolute", "prismatic") or math.isfinite(j.velocity):
                attrs = {}
                if j.type in ("revolute", "prismatic"):
                    attrs["lower"] = repr(float(j.lower))
                    attrs["upper"] = repr(float(j.upper))
                if math.isfinite(j.velocity):
                    attrs["velocity"] = repr(float(j.velocity))
                if j.effort is not None:
                    attrs["effort"] = repr(float(j.effort))
                ET.SubElement(el, "limit", **attrs)
            if j.mimic is not None:
                ET.SubElement(el, "mimic", joint=j.mimic[0], multiplier=repr(float(j.mimic[1])),
                              offset=repr(float(j.mimic[2])))
        ET.indent(robot)
        return ET.tostring(robot, encoding="unicode") + "\n"


def _fmt(vals):
    return " ".join(repr(float(v)) for v in vals)
