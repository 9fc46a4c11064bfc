"""4DOF relative poses: 3D translation plus a rotation about the gravity axis.

Rotations restricted to yaw form a closed subgroup of SE(3), so composition
stays exact without carrying full rotation matrices. Two flavours live here:
the :class:`Pose4` value type for scalar work, and ``*_array`` functions that
operate on ``(..., 4)`` arrays laid out as ``(x, y, z, yaw)`` for batched loss
evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]; values already inside are returned unchanged."""
    if -math.pi < a <= math.pi:
        return a
    w = math.atan2(math.sin(a), math.cos(a))
    # atan2 returns -pi for angles on the negative branch cut
    if w <= -math.pi:
        w += TWO_PI
    return w


def wrap_angle_array(a: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    a = np.asarray(a, dtype=np.float64)
    w = np.arctan2(np.sin(a), np.cos(a))
    w = np.where(w <= -np.pi, w + TWO_PI, w)
    return np.where((a > -np.pi) & (a <= np.pi), a, w)


@dataclass(frozen=True)
class Pose4:
    """Pose of a child frame expressed in a parent frame.

    Units are meters for ``x, y, z`` and radians for ``yaw``; yaw is kept
    normalised to (-pi, pi].
    """

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self) -> None:
        vals = (self.x, self.y, self.z, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite pose field in {vals}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "z", float(self.z))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def identity(cls) -> Pose4:
        return cls(0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, v) -> Pose4:
        x, y, z, yaw = (float(c) for c in v)
        return cls(x, y, z, yaw)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.yaw], dtype=np.float64)

    def __matmul__(self, other: Pose4) -> Pose4:
        return compose(self, other)

    def inverse(self) -> Pose4:
        return invert(self)


IDENTITY = Pose4()


def compose(a: Pose4, b: Pose4) -> Pose4:
    """Pose of ``b``'s child frame expressed in ``a``'s parent frame."""
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose4(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.z + b.z,
        a.yaw + b.yaw,
    )


def invert(a: Pose4) -> Pose4:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose4(
        -(c * a.x + s * a.y),
        -(-s * a.x + c * a.y),
        -a.z,
        -a.yaw,
    )


def delta(a: Pose4, b: Pose4) -> float:
    """L1 distance between pose vectors, yaw difference taken on the circle."""
    return (
        abs(a.x - b.x)
        + abs(a.y - b.y)
        + abs(a.z - b.z)
        + abs(wrap_angle(a.yaw - b.yaw))
    )


def flip(a: Pose4) -> Pose4:
    """Mirror a pose through the x-z plane (horizontal image flip)."""
    return Pose4(a.x, -a.y, a.z, -a.yaw)


# -- batched versions -------------------------------------------------------


def as_pose_array(poses) -> np.ndarray:
    """Stack a sequence of :class:`Pose4` (or an array) into shape ``(n, 4)``."""
    if isinstance(poses, np.ndarray):
        return np.asarray(poses, dtype=np.float64).reshape(-1, 4)
    return np.array([p.as_array() for p in poses], dtype=np.float64).reshape(-1, 4)


def compose_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c, s = np.cos(a[..., 3]), np.sin(a[..., 3])
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 0] + c * b[..., 0] - s * b[..., 1]
    out[..., 1] = a[..., 1] + s * b[..., 0] + c * b[..., 1]
    out[..., 2] = a[..., 2] + b[..., 2]
    out[..., 3] = wrap_angle_array(a[..., 3] + b[..., 3])
    return out


def invert_array(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    c, s = np.cos(a[..., 3]), np.sin(a[..., 3])
    out = np.empty_like(a)
    out[..., 0] = -(c * a[..., 0] + s * a[..., 1])
    out[..., 1] = s * a[..., 0] - c * a[..., 1]
    out[..., 2] = -a[..., 2]
    out[..., 3] = wrap_angle_array(-a[..., 3])
    return out


def residual_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Component-wise ``a - b`` with the yaw component wrapped."""
    r = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    r[..., 3] = wrap_angle_array(r[..., 3])
    return r


def delta_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(residual_array(a, b)).sum(axis=-1)


def flip_array(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out[..., 1] *= -1.0
    out[..., 3] *= -1.0
    return out


def format_pose_fields(p: Pose4) -> list[str]:
    """Serialise a pose as four decimal strings that round-trip exactly."""
    return [repr(float(v)) for v in (p.x, p.y, p.z, p.yaw)]
