"""Rotation and translation arithmetic for pose navigation.

Conventions used across the whole package:

* Euler triple (azimuth, elevation, inplane), radians, each wrapped to
  (-pi, pi].  Azimuth rotates about +y, elevation about +x, in-plane
  about +z, composed as ``R = R_z(inplane) @ R_x(elevation) @ R_y(azimuth)``.
* Quaternions are scalar-first (w, x, y, z), unit norm, with the sign
  canonicalized so w >= 0 (first nonzero component positive when w == 0).
  The canonical sign makes the quaternion residual used by rewards and
  imitation losses vanish exactly at the goal action instead of landing
  on the far sheet of the double cover.
* Translation is (tx, ty, scale): image-plane shifts in normalized image
  units plus a log-scale along the viewing axis.  All three live in one
  Euclidean error metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(angle):
    """Wrap an angle (scalar or array, radians) into (-pi, pi singleton]."""
    arr = np.asarray(angle, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("wrap_angle requires finite input")
    return np.pi - np.mod(np.pi - arr, TWO_PI)


def _wrap_component(x: float) -> float:
    # already-wrapped values pass through bit-identically
    x = float(x)
    if not math.isfinite(x):
        raise ValueError("angle must be finite")
    return x if -math.pi < x <= math.pi else float(wrap_angle(x))


@dataclass(frozen=True)
class EulerPose:
    """Orientation as (azimuth, elevation, inplane), radians.

    Components are wrapped to (-pi, pi] on construction.
    """

    azimuth: float
    elevation: float
    inplane: float

    def __post_init__(self):
        object.__setattr__(self, "azimuth", _wrap_component(self.azimuth))
        object.__setattr__(self, "elevation", _wrap_component(self.elevation))
        object.__setattr__(self, "inplane", _wrap_component(self.inplane))

    def as_array(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.inplane], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "EulerPose":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (3,):
            raise ValueError(f"euler triple must have shape (3,), got {a.shape}")
        return EulerPose(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class Translation:
    """Image-plane shift (tx, ty) plus log-scale along the view axis.

    Clamped on construction: tx, ty to [-0.5, 0.5], scale to [-1, 1].
    """

    tx: float
    ty: float
    scale: float

    def __post_init__(self):
        for name in ("tx", "ty", "scale"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
            lim = 1.0 if name == "scale" else 0.5
            object.__setattr__(self, name, min(lim, max(-lim, v)))

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.scale], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Translation":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (3,):
            raise ValueError(f"translation must have shape (3,), got {a.shape}")
        return Translation(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion, scalar-first, canonical sign (w >= 0)."""

    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


def _canonical_sign(q: np.ndarray) -> np.ndarray:
    # First nonzero component positive; for unit quaternions of rotations
    # this reduces to w >= 0 except on the w == 0 great circle.
    for component in q:
        if component != 0.0:
            return q if component > 0.0 else -q
    return q


def quat_multiply(a: Quaternion, b: Quaternion) -> Quaternion:
    """Hamilton product a * b (apply b first, then a). Not canonicalized."""
    aw, ax, ay, az = a.w, a.x, a.y, a.z
    bw, bx, by, bz = b.w, b.x, b.y, b.z
    return Quaternion(
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def euler_to_matrix(pose: EulerPose) -> np.ndarray:
    """Rotation matrix R_z(inplane) @ R_x(elevation) @ R_y(azimuth)."""
    ca, sa = math.cos(pose.azimuth), math.sin(pose.azimuth)
    cb, sb = math.cos(pose.elevation), math.sin(pose.elevation)
    cc, sc = math.cos(pose.inplane), math.sin(pose.inplane)
    r_y = np.array([[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]])
    r_x = np.array([[1.0, 0.0, 0.0], [0.0, cb, -sb], [0.0, sb, cb]])
    r_z = np.array([[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]])
    return r_z @ r_x @ r_y


def euler_to_quaternion(pose: EulerPose) -> Quaternion:
    """Unit quaternion of the same rotation as euler_to_matrix, canonical sign."""
    ha, hb, hc = 0.5 * pose.azimuth, 0.5 * pose.elevation, 0.5 * pose.inplane
    q_y = Quaternion(math.cos(ha), 0.0, math.sin(ha), 0.0)
    q_x = Quaternion(math.cos(hb), math.sin(hb), 0.0, 0.0)
    q_z = Quaternion(math.cos(hc), 0.0, 0.0, math.sin(hc))
    q = quat_multiply(q_z, quat_multiply(q_x, q_y))
    arr = _canonical_sign(q.as_array())
    return Quaternion(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


def euler_difference(goal: EulerPose, current: EulerPose) -> EulerPose:
    """Component-wise difference goal - current, each component wrapped."""
    d = wrap_angle(goal.as_array() - current.as_array())
    return EulerPose.from_array(d)


def quat_residual(goal: EulerPose, current: EulerPose) -> Quaternion:
    """Quaternion of the wrapped component-wise Euler difference.

    The canonical sign makes the residual of a half-turn unambiguous:
    +pi and -pi azimuth differences map to the same quaternion, so a
    squared-error loss on this residual has no seam at the wrap point.
    """
    return euler_to_quaternion(euler_difference(goal, current))


def rotation_error(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic angle in radians between two rotation matrices.

    arccos((trace(r_a @ r_b.T) - 1) / 2) with the argument clamped to
    [-1, 1] so accumulated float error near 0 and pi cannot produce NaN.
    """
    r_a = np.asarray(r_a, dtype=np.float64)
    r_b = np.asarray(r_b, dtype=np.float64)
    if r_a.shape != (3, 3) or r_b.shape != (3, 3):
        raise ValueError("rotation_error expects two 3x3 matrices")
    c = (np.trace(r_a @ r_b.T) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


def translation_error(t_a: Translation, t_b: Translation) -> float:
    """Euclidean norm over (tx, ty, scale), normalized image units."""
    return float(np.linalg.norm(t_a.as_array() - t_b.as_array()))


def symmetric_rotation_error(r_a: np.ndarray, r_b: np.ndarray, axis) -> float:
    """Angle between the images of a symmetry axis under two rotations.

    Spin about the axis itself is free: any pair differing only by a
    rotation around ``axis`` scores zero.  Evaluated through the chord
    length, 2*arcsin(|a - b|/2), which equals arccos(a . b) for unit
    vectors but keeps full precision near zero where arccos turns one
    ulp of dot-product rounding into ~1e-8 of angle.
    """
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("symmetry axis must be nonzero")
    axis = axis / n
    a = np.asarray(r_a, dtype=np.float64) @ axis
    b = np.asarray(r_b, dtype=np.float64) @ axis
    half_chord = 0.5 * float(np.linalg.norm(a - b))
    return 2.0 * float(math.asin(min(1.0, half_chord)))
