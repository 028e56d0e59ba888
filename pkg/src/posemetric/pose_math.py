"""Rotation representations and geodesic pose distance.

Convention: a pose (azimuth a, elevation b, in-plane c) is the rotation

    R = Rz(c) @ Rx(b) @ Ry(a)

with right-handed elementary rotations.  The matching quaternion is
``qz(c) * qx(b) * qy(a)`` in (w, x, y, z) order.  Distances between poses do
not depend on this choice; it only has to be used consistently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to [0, 2*pi)."""
    wrapped = math.fmod(theta, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    # fmod of values like -1e-17 lands exactly on 2*pi after the shift
    if wrapped >= TWO_PI:
        wrapped = 0.0
    return wrapped


@dataclass(frozen=True)
class EulerPose:
    """Viewpoint angles in radians; azimuth is kept in [0, 2*pi)."""

    azimuth: float
    elevation: float
    inplane: float

    def __post_init__(self):
        object.__setattr__(self, "azimuth", wrap_angle(float(self.azimuth)))
        object.__setattr__(self, "elevation", float(self.elevation))
        object.__setattr__(self, "inplane", float(self.inplane))

    @classmethod
    def from_degrees(cls, azimuth: float, elevation: float, inplane: float) -> "EulerPose":
        return cls(math.radians(azimuth), math.radians(elevation), math.radians(inplane))

    def degrees(self) -> tuple[float, float, float]:
        return (math.degrees(self.azimuth), math.degrees(self.elevation), math.degrees(self.inplane))

    def as_array(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.inplane])

    def mirrored(self) -> "EulerPose":
        """Pose seen through a horizontal image flip."""
        return EulerPose(-self.azimuth, self.elevation, -self.inplane)


@dataclass(frozen=True)
class Quat:
    """Unit quaternion (w, x, y, z).  ``q`` and ``-q`` are the same rotation."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        norm = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if norm == 0.0 or not math.isfinite(norm):
            raise ValueError("quaternion must have finite nonzero norm")
        for name in ("w", "x", "y", "z"):
            object.__setattr__(self, name, float(getattr(self, name)) / norm)

    def __neg__(self) -> "Quat":
        # skip renormalization so that -q is the exact componentwise negation
        neg = object.__new__(Quat)
        for name in ("w", "x", "y", "z"):
            object.__setattr__(neg, name, -getattr(self, name))
        return neg

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def dot(self, other: "Quat") -> float:
        return self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z


def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product of (..., 4) arrays in (w, x, y, z) order."""
    pw, px, py, pz = np.moveaxis(np.asarray(p, dtype=float), -1, 0)
    qw, qx, qy, qz = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def euler_to_quat_array(angles: np.ndarray) -> np.ndarray:
    """Vectorized conversion of (..., 3) [azimuth, elevation, inplane] to (..., 4) quaternions."""
    angles = np.asarray(angles, dtype=float)
    half = 0.5 * angles
    ca, sa = np.cos(half[..., 0]), np.sin(half[..., 0])
    cb, sb = np.cos(half[..., 1]), np.sin(half[..., 1])
    cc, sc = np.cos(half[..., 2]), np.sin(half[..., 2])
    zeros = np.zeros_like(ca)
    qy = np.stack([ca, zeros, sa, zeros], axis=-1)
    qx = np.stack([cb, sb, zeros, zeros], axis=-1)
    qz = np.stack([cc, zeros, zeros, sc], axis=-1)
    return quat_multiply(quat_multiply(qz, qx), qy)


def euler_to_quat(p: EulerPose) -> Quat:
    """Scalar form of :func:`euler_to_quat_array` (qz * qx * qy expanded)."""
    ca, sa = math.cos(0.5 * p.azimuth), math.sin(0.5 * p.azimuth)
    cb, sb = math.cos(0.5 * p.elevation), math.sin(0.5 * p.elevation)
    cc, sc = math.cos(0.5 * p.inplane), math.sin(0.5 * p.inplane)
    w1, x1, y1, z1 = cc * cb, cc * sb, sc * sb, sc * cb
    return Quat(w1 * ca - y1 * sa, x1 * ca - z1 * sa, w1 * sa + y1 * ca, x1 * sa + z1 * ca)


def quat_to_matrix_array(q: np.ndarray) -> np.ndarray:
    """(..., 4) unit quaternions to (..., 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def euler_to_matrix_array(angles: np.ndarray) -> np.ndarray:
    """Rz(inplane) @ Rx(elevation) @ Ry(azimuth) for (..., 3) angle arrays."""
    angles = np.asarray(angles, dtype=float)
    ca, sa = np.cos(angles[..., 0]), np.sin(angles[..., 0])
    cb, sb = np.cos(angles[..., 1]), np.sin(angles[..., 1])
    cc, sc = np.cos(angles[..., 2]), np.sin(angles[..., 2])
    # expanded product; see module docstring for the composition order
    return np.stack(
        [
            np.stack([cc * ca - sc * sb * sa, -sc * cb, cc * sa + sc * sb * ca], axis=-1),
            np.stack([sc * ca + cc * sb * sa, cc * cb, sc * sa - cc * sb * ca], axis=-1),
            np.stack([-cb * sa, sb, cb * ca], axis=-1),
        ],
        axis=-2,
    )


def matrix_to_euler_array(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_matrix_array` for elevations inside (-pi/2, pi/2)."""
    R = np.asarray(R, dtype=float)
    elevation = np.arcsin(np.clip(R[..., 2, 1], -1.0, 1.0))
    azimuth = np.mod(np.arctan2(-R[..., 2, 0], R[..., 2, 2]), TWO_PI)
    inplane = np.arctan2(-R[..., 0, 1], R[..., 1, 1])
    return np.stack([azimuth, elevation, inplane], axis=-1)


def quat_to_euler(q: Quat) -> EulerPose:
    a, b, c = matrix_to_euler_array(quat_to_matrix_array(q.as_array()))
    return EulerPose(a, b, c)


def geodesic_distance_array(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Rotation angle between broadcastable (..., 4) unit quaternion arrays.

    Evaluated as 4 atan2(|q1 - s q2|, |q1 + s q2|) with s = sign(q1 . q2),
    which equals 2 acos(|q1 . q2|) for unit inputs but is exactly 0 for
    q2 = +-q1, exactly symmetric, and accurate for small angles.
    """
    q1, q2 = np.broadcast_arrays(np.asarray(q1, dtype=float), np.asarray(q2, dtype=float))
    dot = (q1 * q2).sum(axis=-1)
    a = np.where((dot < 0.0)[..., None], -q2, q2)
    diff = q1 - a
    summ = q1 + a
    theta = 4.0 * np.arctan2(np.sqrt((diff * diff).sum(axis=-1)), np.sqrt((summ * summ).sum(axis=-1)))
    # |dot| = 0 exactly: both sign choices are valid, the angle is pi
    return np.where(dot == 0.0, math.pi, theta)


def geodesic_distance(q1: Quat, q2: Quat) -> float:
    """Angle in [0, pi] of the relative rotation; same arithmetic as the array form."""
    a, b = (q1.w, q1.x, q1.y, q1.z), (q2.w, q2.x, q2.y, q2.z)
    dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
    if dot == 0.0:
        return math.pi
    if dot < 0.0:
        b = [-x for x in b]
    d = [x - y for x, y in zip(a, b)]
    p = [x + y for x, y in zip(a, b)]
    nd = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + d[3] * d[3])
    npl = math.sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2] + p[3] * p[3])
    # numpy's arctan2, not math.atan2: the two differ in the last ulp
    return 4.0 * float(np.arctan2(nd, npl))


def pairwise_geodesic(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """(n, m) matrix of geodesic distances between rows of qa (n, 4) and qb (m, 4)."""
    qa, qb = np.asarray(qa, dtype=float), np.asarray(qb, dtype=float)
    return geodesic_distance_array(qa[:, None, :], qb[None, :, :])


def poses_to_quats(poses) -> np.ndarray:
    """Stack a sequence of EulerPose into an (n, 4) quaternion array."""
    angles = np.array([p.as_array() for p in poses], dtype=float).reshape(-1, 3)
    return euler_to_quat_array(angles)
