"""Regression metrics on 4DOF outputs ``(x, y, z, yaw)``.

MAE is reported as the per-component mean (L1 distance / 4); the plain L1 sum
is available as :func:`mae_sum`. Yaw residuals are always wrapped onto the
circle, and R^2 measures yaw spread around the circular mean of the targets.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .pose import as_pose_array, residual_array, wrap_angle_array

OUTPUTS = ("x", "y", "z", "yaw")


class MetricError(ValueError):
    pass


def _check(pred, target):
    p, t = as_pose_array(pred), as_pose_array(target)
    if len(p) == 0:
        raise MetricError("metrics need at least one sample")
    if p.shape != t.shape:
        raise MetricError(f"predictions {p.shape} vs targets {t.shape}")
    return p, t


def mae(predictions, targets) -> float:
    p, t = _check(predictions, targets)
    return float(np.abs(residual_array(p, t)).mean())


def mae_sum(predictions, targets) -> float:
    p, t = _check(predictions, targets)
    return float(np.abs(residual_array(p, t)).sum(axis=1).mean())


def mae_per_output(predictions, targets) -> np.ndarray:
    p, t = _check(predictions, targets)
    return np.abs(residual_array(p, t)).mean(axis=0)


def circular_mean(angles: np.ndarray) -> float:
    return float(np.arctan2(np.sin(angles).mean(), np.cos(angles).mean()))


@dataclass
class R2Score:
    per_output: np.ndarray  # percent, nan where undefined
    undefined: tuple[str, ...] = ()

    @property
    def mean(self) -> float:
        valid = self.per_output[~np.isnan(self.per_output)]
        return float(valid.mean()) if valid.size else float("nan")


def r2(predictions, targets) -> R2Score:
    """Coefficient of determination per output, in percent."""
    p, t = _check(predictions, targets)
    res = residual_array(p, t)
    centre = t.mean(axis=0)
    centre[3] = circular_mean(t[:, 3])
    spread = t - centre
    spread[:, 3] = wrap_angle_array(spread[:, 3])
    ss_res = (res**2).sum(axis=0)
    ss_tot = (spread**2).sum(axis=0)
    out = np.full(4, np.nan)
    undefined = []
    for k in range(4):
        if ss_tot[k] <= 1e-12 * max(1.0, ss_res[k]):
            undefined.append(OUTPUTS[k])
        else:
            out[k] = 100.0 * (1.0 - ss_res[k] / ss_tot[k])
    return R2Score(out, tuple(undefined))


@dataclass
class MetricsReport:
    mae: float
    mae_sum: float
    mae_per_output: np.ndarray
    r2: R2Score
    n: int
    per_subject: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = {"n": self.n, "mae": self.mae, "mae_sum": self.mae_sum, "r2_mean": self.r2.mean}
        for k, name in enumerate(OUTPUTS):
            d[f"mae_{name}"] = float(self.mae_per_output[k])
            d[f"r2_{name}"] = float(self.r2.per_output[k])
        return d


def evaluate(predictions, targets, subjects: Iterable[str] | None = None) -> MetricsReport:
    p, t = _check(predictions, targets)
    report = MetricsReport(mae(p, t), mae_sum(p, t), mae_per_output(p, t), r2(p, t), len(p))
    if subjects is not None:
        subjects = np.asarray(list(subjects))
        for s in sorted(set(subjects.tolist())):
            m = subjects == s
            report.per_subject[s] = evaluate(p[m], t[m])
    return report


def write_r2_matrix(path, rows: Iterable[tuple[str, str, R2Score]]) -> None:
    """CSV with one line per (fine-tune subject, test subject): R^2 per output and mean."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["finetune_subject", "test_subject", *[f"r2_{o}" for o in OUTPUTS], "r2_mean"])
        for ft, test, score in rows:
            w.writerow([ft, test, *[f"{v:.6g}" for v in score.per_output], f"{score.mean:.6g}"])
