"""Task loss, state-consistency loss and their combination.

Both terms compare 4DOF pose vectors with the L1 distance of
:func:`nanotune.pose.delta`. The subgradient at an exact zero residual is 0.

The consistency chain for a pair ``(i, j)`` composes

    inverse(pred_i) @ odom_ij @ pred_j

which is the pose of the subject at ``j`` expressed in the subject frame at
``i``. By default it is compared against exactly that quantity; pass
``inverse_target=True`` to compare against its inverse instead.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .pose import (
    IDENTITY,
    Pose4,
    as_pose_array,
    compose,
    compose_array,
    delta,
    invert,
    invert_array,
    residual_array,
)


class UndefinedTermError(ValueError):
    """A loss term was evaluated over an empty sample set."""


class ScenarioError(ValueError):
    pass


# -- task loss ----------------------------------------------------------------


def task_loss(predictions, targets) -> float:
    return task_loss_and_grad(predictions, targets)[0]


def task_loss_and_grad(predictions, targets) -> tuple[float, np.ndarray]:
    """Mean L1 pose distance and its gradient w.r.t. ``predictions``."""
    pred = as_pose_array(predictions)
    tgt = as_pose_array(targets)
    if len(pred) == 0:
        raise UndefinedTermError("task loss over an empty sample set")
    if pred.shape != tgt.shape:
        raise ValueError(f"predictions {pred.shape} vs targets {tgt.shape}")
    r = residual_array(pred, tgt)
    n = len(pred)
    return float(np.abs(r).sum() / n), np.sign(r) / n


def propagate_target(known: Pose4, odometry: Pose4) -> Pose4:
    """Subject pose at ``j`` given its pose at ``i`` and drone motion ``i -> j``.

    Valid while the subject stays still between the two instants.
    """
    return compose(invert(odometry), known)


# -- state consistency --------------------------------------------------------


def consistency_chain(pred_i, pred_j, odom) -> np.ndarray:
    return compose_array(compose_array(invert_array(pred_i), odom), pred_j)


def sc_loss(pred_i: Pose4, pred_j: Pose4, odom_ij: Pose4, subj_rel: Pose4, inverse_target: bool = False) -> float:
    chain = compose(compose(invert(pred_i), odom_ij), pred_j)
    target = invert(subj_rel) if inverse_target else subj_rel
    return delta(chain, target)


def sc_loss_and_grad(pred_i, pred_j, odom, subj, inverse_target: bool = False):
    """Mean consistency loss over pairs with gradients w.r.t. both predictions.

    With ``a = pred_i``, ``b = pred_j``, ``o = odom`` the chain is

        xy  = R(-a_yaw) (o_xy - a_xy) + R(o_yaw - a_yaw) b_xy
        z   = o_z - a_z + b_z
        yaw = o_yaw - a_yaw + b_yaw
    """
    a = as_pose_array(pred_i)
    b = as_pose_array(pred_j)
    o = as_pose_array(odom)
    s = as_pose_array(subj)
    n = len(a)
    if n == 0:
        raise UndefinedTermError("consistency loss over an empty pair set")
    if inverse_target:
        s = invert_array(s)
    chain = consistency_chain(a, b, o)
    r = residual_array(chain, s)
    g = np.sign(r) / n  # dL/dchain
    gx, gy = g[:, 0], g[:, 1]

    ca, sa = np.cos(a[:, 3]), np.sin(a[:, 3])
    cr, sr = np.cos(o[:, 3] - a[:, 3]), np.sin(o[:, 3] - a[:, 3])
    dx, dy = o[:, 0] - a[:, 0], o[:, 1] - a[:, 1]
    bx, by = b[:, 0], b[:, 1]

    grad_a = np.empty_like(a)
    grad_b = np.empty_like(b)
    # d xy / d a_xy = -R(-a_yaw), transposed: -R(a_yaw)
    grad_a[:, 0] = -(ca * gx - sa * gy)
    grad_a[:, 1] = -(sa * gx + ca * gy)
    grad_a[:, 2] = -g[:, 2]
    # d xy / d a_yaw, from both rotations
    ddx = -sa * dx + ca * dy + sr * bx + cr * by
    ddy = -ca * dx - sa * dy - cr * bx + sr * by
    grad_a[:, 3] = gx * ddx + gy * ddy - g[:, 3]
    # d xy / d b_xy = R(o_yaw - a_yaw); the chain translation ignores b_yaw
    grad_b[:, 0] = cr * gx + sr * gy
    grad_b[:, 1] = -sr * gx + cr * gy
    grad_b[:, 2] = g[:, 2]
    grad_b[:, 3] = g[:, 3]
    return float(np.abs(r).sum() / n), grad_a, grad_b


# -- scenarios ----------------------------------------------------------------

_DRONE_TOKENS = {"D": "D", "dD": "dD", "dD~": "dD~", "ΔD": "dD", "Δ~D": "dD~", "ΔD~": "dD~"}
_SUBJ_TOKENS = {"H": "H", "dH": "dH", "H?": "H?", "ΔH": "dH", "H-": "H?"}


def _parse_set(tok: str) -> str:
    tok = tok.strip()
    if tok == "a" or re.fullmatch(r"s\d+", tok):
        return tok
    raise ScenarioError(f"bad sample-set selector {tok!r}; use 'a' or 's<N>'")


@dataclass(frozen=True)
class LossScenario:
    """Which loss terms are active and where their labels come from.

    ``task_set``/``sc_set`` are ``"a"`` (all samples), ``"s<N>"`` (N samples
    drawn from subject-still windows) or ``None`` (term absent). ``drone`` is
    one of ``D`` (perfect absolute), ``dD`` (perfect odometry), ``dD~`` (noisy
    odometry); ``subject`` one of ``H``, ``dH``, ``H?`` (unknown: identity).
    """

    task_set: Optional[str] = "a"
    sc_set: Optional[str] = None
    drone: str = "D"
    subject: str = "H"
    dt: float = 2.0
    lam: float = 1.0
    inverse_target: bool = False

    def __post_init__(self) -> None:
        if self.task_set is None and self.sc_set is None:
            raise ScenarioError("scenario needs a task term, a consistency term, or both")
        for s in (self.task_set, self.sc_set):
            if s is not None:
                _parse_set(s)
        if self.drone not in ("D", "dD", "dD~"):
            raise ScenarioError(f"unknown drone mode {self.drone!r}")
        if self.subject not in ("H", "dH", "H?"):
            raise ScenarioError(f"unknown subject mode {self.subject!r}")
        if self.dt <= 0:
            raise ScenarioError("dt must be positive")

    @staticmethod
    def set_size(sel: Optional[str]) -> Optional[int]:
        """``None`` for all samples, N for ``s<N>``."""
        if sel is None or sel == "a":
            return None
        return int(sel[1:])

    @property
    def label(self) -> str:
        terms = []
        if self.task_set is not None:
            terms.append(f"t({self.task_set})")
        if self.sc_set is not None:
            terms.append(f"sc({self.sc_set},{self.drone},{self.subject})")
        return "+".join(terms)

    @classmethod
    def parse(cls, label: str, dt: float = 2.0, lam: float = 1.0, inverse_target: bool = False) -> LossScenario:
        task_set = sc_set = None
        drone, subject = "D", "H"
        text = label.replace(" ", "")
        terms = [t for t in re.split(r"\+(?![^()]*\))", text) if t]
        if not terms:
            raise ScenarioError(f"empty scenario label {label!r}")
        for term in terms:
            m = re.fullmatch(r"t\(([^)]*)\)", term)
            if m:
                args = m.group(1).split(",")
                task_set = _parse_set(args[0])
                if len(args) >= 2:
                    drone = _DRONE_TOKENS.get(args[1], None) or _bad(args[1], label)
                if len(args) == 3:
                    subject = _SUBJ_TOKENS.get(args[2], None) or _bad(args[2], label)
                continue
            m = re.fullmatch(r"sc\(([^)]*)\)", term)
            if m:
                args = m.group(1).split(",")
                if len(args) != 3:
                    raise ScenarioError(f"sc term needs (set,drone,subject): {term!r}")
                sc_set = _parse_set(args[0])
                drone = _DRONE_TOKENS.get(args[1], None) or _bad(args[1], label)
                subject = _SUBJ_TOKENS.get(args[2], None) or _bad(args[2], label)
                continue
            raise ScenarioError(f"cannot parse term {term!r} in {label!r}")
        return cls(task_set, sc_set, drone, subject, dt=dt, lam=lam, inverse_target=inverse_target)


def _bad(tok, label):
    raise ScenarioError(f"unknown token {tok!r} in scenario {label!r}")


# -- sample containers --------------------------------------------------------


@dataclass(frozen=True)
class TaskSample:
    i: int
    target: Pose4
    in_task_set: bool = True


@dataclass(frozen=True)
class ConsistencyPair:
    i: int
    j: int
    odom: Pose4
    subj_rel: Pose4 = field(default=IDENTITY)
    in_sc_set: bool = True


@dataclass
class LossValue:
    total: float
    task: Optional[float]
    sc: Optional[float]
    grad_task: Optional[np.ndarray] = None
    grad_i: Optional[np.ndarray] = None
    grad_j: Optional[np.ndarray] = None


def combined_loss(
    scenario: LossScenario,
    task_pred=None,
    task_targets=None,
    pair_pred_i=None,
    pair_pred_j=None,
    pairs: Sequence[ConsistencyPair] = (),
) -> LossValue:
    """``task + lam * sc``, skipping whichever term has no samples."""
    has_task = task_pred is not None and len(task_pred) > 0
    has_sc = pair_pred_i is not None and len(pairs) > 0
    if not has_task and not has_sc:
        raise ScenarioError("both loss terms are empty")
    total = 0.0
    out = LossValue(0.0, None, None)
    if has_task:
        out.task, out.grad_task = task_loss_and_grad(task_pred, task_targets)
        total += out.task
    if has_sc:
        odom = np.array([p.odom.as_array() for p in pairs])
        subj = np.array([p.subj_rel.as_array() for p in pairs])
        out.sc, gi, gj = sc_loss_and_grad(pair_pred_i, pair_pred_j, odom, subj, scenario.inverse_target)
        total += scenario.lam * out.sc
        out.grad_i, out.grad_j = scenario.lam * gi, scenario.lam * gj
    out.total = total
    return out


# -- sample construction ------------------------------------------------------


def sample_period(timestamps) -> float:
    ts = np.asarray(timestamps, dtype=np.float64)
    if len(ts) < 2:
        raise ValueError("need at least two timestamps to infer the sample period")
    return float(np.median(np.diff(ts)))


def dt_steps(dt: float, period: float) -> int:
    steps = int(round(dt / period))
    if steps < 1 or abs(steps * period - dt) > 1e-6 * max(1.0, dt):
        raise ValueError(f"dt={dt} s is not a multiple of the sample period {period} s")
    return steps


def _drone_relative(records, estimates, mode: str, i: int, j: int) -> Pose4:
    if mode == "dD~":
        if estimates is None:
            raise ScenarioError("noisy-odometry scenario needs simulated odometry estimates")
        return compose(invert(estimates[i]), estimates[j])
    return compose(invert(records[i].drone), records[j].drone)


def _subject_relative(records, mode: str, i: int, j: int) -> Pose4:
    if mode == "H?":
        return IDENTITY
    return compose(invert(records[i].subject), records[j].subject)


def still_runs(indices: Sequence[int]) -> list[list[int]]:
    """Split a sorted index set into runs of consecutive indices."""
    runs: list[list[int]] = []
    for k in sorted(indices):
        if runs and k == runs[-1][-1] + 1:
            runs[-1].append(k)
        else:
            runs.append([k])
    return runs


def build_pairs(
    records,
    dt: float,
    scenario: LossScenario,
    estimates=None,
    still: Optional[Sequence[int]] = None,
    rng: Optional[np.random.Generator] = None,
) -> list[ConsistencyPair]:
    """Consistency pairs ``(i, i + dt * rate)`` over ``records``.

    Indices are positions within ``records``. For an ``s<N>`` selector both
    ends of a pair must lie in the same still window (``still`` holds
    positions), and at most N pairs are drawn with ``rng``.
    """
    n = len(records)
    if n < 2 or scenario.sc_set is None:
        return []
    step = dt_steps(dt, sample_period([r.timestamp for r in records]))
    if step >= n:
        return []
    candidates = list(range(n - step))
    cap = LossScenario.set_size(scenario.sc_set)
    if cap is not None:
        if still is None:
            raise ScenarioError("still-subset selector needs detected still indices")
        window_of = {}
        for w, run in enumerate(still_runs(still)):
            for k in run:
                window_of[k] = w
        candidates = [i for i in candidates if i in window_of and window_of.get(i + step) == window_of[i]]
        if len(candidates) > cap:
            rng = rng if rng is not None else np.random.default_rng(0)
            candidates = sorted(rng.choice(candidates, size=cap, replace=False).tolist())
    return [
        ConsistencyPair(
            i,
            i + step,
            _drone_relative(records, estimates, scenario.drone, i, i + step),
            _subject_relative(records, scenario.subject, i, i + step),
        )
        for i in candidates
    ]


def build_task_samples(
    records,
    scenario: LossScenario,
    estimates=None,
    still: Optional[Sequence[int]] = None,
    rng: Optional[np.random.Generator] = None,
) -> list[TaskSample]:
    """Task samples with (possibly propagated) targets.

    ``"a"`` uses the ground-truth relative pose of every record. ``"s<N>"``
    draws N positions from still windows; the subject pose is known at the
    first frame of each window and carried forward with drone odometry.
    """
    if scenario.task_set is None:
        return []
    if scenario.task_set == "a":
        return [TaskSample(i, r.relative) for i, r in enumerate(records)]
    if still is None:
        raise ScenarioError("still-subset selector needs detected still indices")
    cap = LossScenario.set_size(scenario.task_set)
    runs = still_runs(still)
    start_of = {k: run[0] for run in runs for k in run}
    pool = sorted(start_of)
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(pool) > cap:
        pool = sorted(rng.choice(pool, size=cap, replace=False).tolist())
    out = []
    for j in pool:
        i = start_of[j]
        odom = _drone_relative(records, estimates, scenario.drone, i, j)
        out.append(TaskSample(j, propagate_target(records[i].relative, odom)))
    return out
