"""Quaternion and rigid-transform arithmetic.

Conventions: quaternions are ``(w, x, y, z)`` numpy arrays, Hamilton product,
a rotation acts on a vector as ``q v q^-1``. Poses serialize as
``[x, y, z, qw, qx, qy, qz]`` in meters. Outputs that leave the package
(serialization, slerp) are sign-canonical with ``w >= 0``; intermediate
arithmetic keeps whatever sign falls out.

Most quaternion helpers broadcast over leading axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])

# below this angle slerp degenerates to normalized lerp (sin(theta) ~ 0)
_SLERP_EPS = 1e-12


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_canonical(q):
    """Flip sign so that ``w >= 0`` (double-cover resolution)."""
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        return -q if q[0] < 0 else q.copy()
    return np.where(q[..., :1] < 0, -q, q)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


quat_inverse = quat_conj  # unit quaternions only


def quat_mul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_rotate(q, v):
    """Rotate vector(s) ``v`` by unit quaternion(s) ``q``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return IDENTITY_QUAT.copy()
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis / n])


def quat_from_rotvec(rv):
    rv = np.asarray(rv, dtype=float)
    angle = float(np.linalg.norm(rv))
    if angle < 1e-12:
        return quat_normalize(np.concatenate([[1.0], 0.5 * rv]))
    return quat_from_axis_angle(rv / angle, angle)


def quat_to_rotvec(q):
    """Axis-angle 3-vector of the shortest rotation represented by ``q``."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    v = q[1:]
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        return 2.0 * v
    angle = 2.0 * math.atan2(s, q[0])
    return v * (angle / s)


def quat_yaw(yaw):
    """Rotation about +z."""
    return np.array([math.cos(0.5 * yaw), 0.0, 0.0, math.sin(0.5 * yaw)])


def quat_from_rpy(roll, pitch, yaw):
    """URDF fixed-axis roll/pitch/yaw: ``R = Rz(yaw) Ry(pitch) Rx(roll)``."""
    qx = quat_from_axis_angle((1, 0, 0), roll)
    qy = quat_from_axis_angle((0, 1, 0), pitch)
    qz = quat_from_axis_angle((0, 0, 1), yaw)
    return quat_mul(qz, quat_mul(qy, qx))


def quat_to_rpy(q):
    R = quat_to_matrix(q)
    pitch = math.atan2(-R[2, 0], math.hypot(R[0, 0], R[1, 0]))
    if abs(math.cos(pitch)) < 1e-12:
        # gimbal lock: fold everything into yaw
        return 0.0, pitch, math.atan2(-R[0, 1], R[1, 1])
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return roll, pitch, yaw


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Shepperd's method; returns a unit quaternion with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    m00, m11, m22 = R[0, 0], R[1, 1], R[2, 2]
    tr = m00 + m11 + m22
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif m00 > m11 and m00 > m22:
        s = 2.0 * math.sqrt(1.0 + m00 - m11 - m22)
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif m11 > m22:
        s = 2.0 * math.sqrt(1.0 + m11 - m00 - m22)
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m22 - m00 - m11)
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_canonical(quat_normalize(q))


def geodesic_angle(q0, q1):
    """Rotation angle in ``[0, pi]`` between two orientations.

    Uses ``atan2`` on the relative quaternion rather than ``acos`` of the dot
    product, which loses half the significant digits near zero.
    """
    rel = quat_mul(quat_conj(q0), q1)
    v = np.linalg.norm(rel[..., 1:], axis=-1)
    return 2.0 * np.arctan2(v, np.abs(rel[..., 0]))


def quat_slerp(q0, q1, s):
    """Shortest-arc spherical interpolation, canonical output.

    ``s`` may be a scalar or an array; the result then has shape ``(len(s), 4)``.
    """
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    if np.dot(q0, q1) < 0.0:
        q1 = -q1
    # arc between the quaternions (half the rotation angle), accurate near 0 and pi/2
    theta = 2.0 * math.atan2(np.linalg.norm(q1 - q0), np.linalg.norm(q1 + q0))
    s_arr = np.asarray(s, dtype=float)
    if theta < _SLERP_EPS:
        a = 1.0 - s_arr
        b = s_arr
    else:
        sin_theta = math.sin(theta)
        a = np.sin((1.0 - s_arr) * theta) / sin_theta
        b = np.sin(s_arr * theta) / sin_theta
    out = np.multiply.outer(a, q0) + np.multiply.outer(b, q1)
    return quat_canonical(quat_normalize(out))


def random_quat(rng, size=None):
    """Uniformly distributed unit quaternion(s) (Shoemake)."""
    shape = () if size is None else (size,)
    u1, u2, u3 = rng.random((3,) + shape)
    a = np.sqrt(1 - u1)
    b = np.sqrt(u1)
    q = np.stack(
        [a * np.sin(2 * np.pi * u2), a * np.cos(2 * np.pi * u2),
         b * np.sin(2 * np.pi * u3), b * np.cos(2 * np.pi * u3)],
        axis=-1,
    )
    return quat_canonical(q)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: ``position`` (3,) in meters and unit ``orientation`` (4,) wxyz."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        q = quat_normalize(np.asarray(self.orientation, dtype=float).reshape(4))
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), IDENTITY_QUAT)

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float)
        if a.shape != (7,):
            raise ValueError(f"pose array must have 7 entries, got shape {a.shape}")
        return cls(a[:3], a[3:])

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, 3], matrix_to_quat(T[:3, :3]))

    @classmethod
    def from_translation(cls, xyz):
        return cls(xyz, IDENTITY_QUAT)

    @classmethod
    def from_xyz_rpy(cls, xyz=(0, 0, 0), rpy=(0, 0, 0)):
        return cls(xyz, quat_from_rpy(*rpy))

    def to_array(self):
        """Serialization order ``[x, y, z, qw, qx, qy, qz]`` with ``qw >= 0``."""
        return np.concatenate([self.position, quat_canonical(self.orientation)])

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.orientation)
        T[:3, 3] = self.position
        return T

    @property
    def rotation(self):
        return quat_to_matrix(self.orientation)

    def compose(self, other):
        return pose_compose(self, other)

    __matmul__ = compose

    def inverse(self):
        return pose_inverse(self)

    def apply(self, points):
        """Map point(s) from this frame to the parent frame."""
        return quat_rotate(self.orientation, points) + self.position

    def __repr__(self):
        return f"Pose({np.array2string(self.to_array(), precision=6, separator=', ')})"


def pose_compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: express ``b`` (given in frame ``a``) in ``a``'s parent frame."""
    return Pose(a.position + quat_rotate(a.orientation, b.position),
                quat_mul(a.orientation, b.orientation))


def pose_inverse(p: Pose) -> Pose:
    qi = quat_conj(p.orientation)
    return Pose(-quat_rotate(qi, p.position), qi)


def pose_distance(a: Pose, b: Pose):
    """(position error in m, geodesic angle in rad)."""
    return (float(np.linalg.norm(a.position - b.position)),
            float(geodesic_angle(a.orientation, b.orientation)))


def pose_interp(a: Pose, b: Pose, s: float) -> Pose:
    """Linear position, slerp orientation."""
    return Pose((1.0 - s) * a.position + s * b.position,
                quat_slerp(a.orientation, b.orientation, s))


def rotation_6d(R):
    """First two columns of a rotation matrix, column-major: ``(r00, r10, r20, r01, r11, r21)``."""
    R = np.asarray(R, dtype=float)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def rotation_from_6d(d6):
    """Gram-Schmidt inverse of :func:`rotation_6d`."""
    d6 = np.asarray(d6, dtype=float)
    a = d6[:3] / np.linalg.norm(d6[:3])
    b = d6[3:] - np.dot(a, d6[3:]) * a
    b = b / np.linalg.norm(b)
    return np.stack([a, b, np.cross(a, b)], axis=1)
