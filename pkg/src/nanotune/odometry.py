"""Noisy onboard odometry from ground-truth drone trajectories.

Errors are added to the world-frame pose estimate: x, y and yaw drift as
independent Gaussian random walks (one increment per sample step, the first
sample is error-free), z gets i.i.d. zero-mean Gaussian noise like an
altitude sensor. Relative odometry between two instants is then differenced
from the noisy absolute estimates, so drift grows with the time gap.

The default standard deviations are placeholders, not measured values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .pose import Pose4, compose, invert, wrap_angle_array


@dataclass(frozen=True)
class OdomNoiseParams:
    sigma_x: float = 0.01  # m per sqrt(step)
    sigma_y: float = 0.01  # m per sqrt(step)
    sigma_yaw: float = 0.002  # rad per sqrt(step)
    sigma_z: float = 0.02  # m, stationary
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("sigma_x", "sigma_y", "sigma_yaw", "sigma_z"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def noiseless(self) -> bool:
        return not (self.sigma_x or self.sigma_y or self.sigma_yaw or self.sigma_z)


def simulate_errors(n: int, params: OdomNoiseParams) -> np.ndarray:
    """Error trajectory of shape ``(n, 4)`` as ``(x, y, z, yaw)``."""
    if n < 1:
        raise ValueError("trajectory must contain at least one pose")
    rng = np.random.default_rng(params.seed)
    steps = rng.standard_normal((n - 1, 3)) * np.array([params.sigma_x, params.sigma_y, params.sigma_yaw])
    walk = np.vstack([np.zeros((1, 3)), np.cumsum(steps, axis=0)])
    z = rng.standard_normal(n) * params.sigma_z
    return np.column_stack([walk[:, 0], walk[:, 1], z, walk[:, 2]])


def simulate(true_poses: Sequence[Pose4], params: OdomNoiseParams) -> list[Pose4]:
    """Noisy world-frame pose estimates, deterministic given ``params.seed``."""
    poses = list(true_poses)
    if params.noiseless:
        if not poses:
            raise ValueError("trajectory must contain at least one pose")
        return poses
    err = simulate_errors(len(poses), params)
    truth = np.array([p.as_array() for p in poses])
    est = truth + err
    est[:, 3] = wrap_angle_array(est[:, 3])
    return [Pose4.from_array(row) for row in est]


def relative_odometry(estimates: Sequence[Pose4], i: int, j: int) -> Pose4:
    """Drone pose at ``j`` expressed in the drone frame at ``i``."""
    n = len(estimates)
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"odometry indices ({i}, {j}) out of range for length {n}")
    return compose(invert(estimates[i]), estimates[j])
