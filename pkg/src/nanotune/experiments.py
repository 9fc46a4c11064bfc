"""Cross-validation plans and the three fine-tuning sweeps.

A plan is a list of (subject, fold) runs. Each run draws one fine-tuning
segment from the subject's sequence and evaluates every configured setting
on the held-out remainder, so settings within a run share the same split.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .data.acquisition import AcquisitionError, FinetuneSetSpec, native_rate, split_indices
from .data.records import FlightRecord, images_array, relative_array
from .data.still import detect_still
from .losses import LossScenario, build_pairs, build_task_samples
from .metrics import OUTPUTS, circular_mean, evaluate, mae
from .nn.engine import ModelParams, predict
from .odometry import OdomNoiseParams, simulate
from .trainer import ConfigError, TrainConfig, finetune

log = logging.getLogger(__name__)

STRATEGIES = ("AllWB", "FcWB", "BnWB", "BiasOnly")
LADDER = (
    "t(a)",
    "sc(a,dD,dH)",
    "sc(a,dD~,dH)",
    "sc(a,dD~,H?)",
    "sc(a,dD,H?)",
    "t(s32)+sc(a,dD~,H?)",
    "t(s32)+sc(s128,dD~,H?)",
)
SET_SIZES = (32, 64, 128, 256, 512)
RATES = (4.0, 2.0, 1.0, 0.5)
MAX_DURATION = 128.0


# -- plans --------------------------------------------------------------------


@dataclass(frozen=True)
class Run:
    subject: str
    fold: int
    seed: int


@dataclass(frozen=True)
class ExperimentPlan:
    """``subjects`` x ``folds`` runs; each run gets an independent seed."""

    subjects: tuple
    folds: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.subjects or self.folds < 1:
            raise ValueError("plan needs at least one subject and one fold")

    def runs(self) -> list[Run]:
        out = []
        for s, subject in enumerate(self.subjects):
            for f in range(self.folds):
                ss = np.random.SeedSequence(self.seed, spawn_key=(s, f))
                out.append(Run(subject, f, int(ss.generate_state(1)[0])))
        return out


@dataclass(frozen=True)
class Setting:
    """One fine-tuning configuration evaluated inside a run."""

    spec: FinetuneSetSpec = FinetuneSetSpec()
    strategy: str = "AllWB"
    scenario: str = "t(a)"
    dt: float = 2.0
    labels: tuple = ()  # extra (column, value) pairs copied into the row


@dataclass
class Context:
    """Everything a run needs besides its own seed."""

    params: ModelParams
    sequences: dict
    train: TrainConfig = field(default_factory=TrainConfig)
    odometry: OdomNoiseParams = field(default_factory=OdomNoiseParams)
    gap: int = 100
    max_fraction: float = 0.75
    v_max: float = 0.1
    t_min: float = 1.0


def _metric_fields(pred, targets) -> dict:
    rep = evaluate(pred, targets)
    d = {"mae": rep.mae, "r2_mean": rep.r2.mean}
    for k, name in enumerate(OUTPUTS):
        d[f"mae_{name}"] = float(rep.mae_per_output[k])
    return d


def _split_for(ctx: Context, run: Run, spec: FinetuneSetSpec, seq: Sequence[FlightRecord]):
    # the segment start depends on the run only, so settings share their draw
    return split_indices(len(seq), native_rate(seq), spec, run.seed, ctx.gap, ctx.max_fraction)


def finetune_setting(ctx: Context, setting: Setting, run: Run, estimates=None) -> tuple[dict, Optional[ModelParams]]:
    """Fine-tune one setting for one run; returns the metrics row and the model."""
    seq = ctx.sequences[run.subject]
    if estimates is None:
        estimates = simulate([r.drone for r in seq], replace(ctx.odometry, seed=run.seed))
    row = {"subject": run.subject, "fold": run.fold, "seed": run.seed, **dict(setting.labels)}
    row.update(
        strategy=setting.strategy,
        scenario=setting.scenario,
        dt=setting.dt,
        set_size=setting.spec.nominal_size,
        duration=setting.spec.segment_duration,
        rate=setting.spec.rate,
    )
    try:
        split = _split_for(ctx, run, setting.spec, seq)
        ft = [seq[i] for i in split.finetune_index]
        est = [estimates[i] for i in split.finetune_index]
        test = [seq[i] for i in split.test_index]
        scenario = LossScenario.parse(setting.scenario, dt=setting.dt, lam=ctx.train.lam)
        still = detect_still(ft, ctx.v_max, ctx.t_min)
        rng = np.random.default_rng(run.seed)
        tasks = build_task_samples(ft, scenario, est, still, rng)
        pairs = build_pairs(ft, setting.dt, scenario, est, still, rng)
        row.update(n_finetune=len(ft), n_test=len(test), n_task=len(tasks), n_pairs=len(pairs))
        if (scenario.task_set and not tasks) or (scenario.sc_set and not pairs):
            row.update(status="infeasible", error="no eligible samples for a loss term")
            return row, None
        cfg = replace(ctx.train, strategy=setting.strategy, scenario=setting.scenario, dt=setting.dt, seed=run.seed)
        model, history = finetune(ctx.params, cfg, ft, tasks, pairs)
    except (AcquisitionError, ConfigError) as exc:
        row.update(status="infeasible", error=str(exc))
        return row, None
    x_test, y_test = images_array(test), relative_array(test)
    row.update(_metric_fields(predict(model, model.arch, x_test), y_test))
    row["baseline_mae"] = mae(predict(ctx.params, ctx.params.arch, x_test), y_test)
    row["improvement"] = 1.0 - row["mae"] / row["baseline_mae"]
    row["final_loss"] = history.train_loss[-1]
    steps = np.diff(history.train_loss)
    row["loss_transitions"] = len(steps)
    row["loss_nonincreasing"] = int((steps <= 0).sum())
    row["status"] = "ok"
    return row, model


def run_settings(ctx: Context, settings: Sequence[Setting], run: Run) -> list[dict]:
    """Every setting for one run, sharing the run's odometry draw; one row each."""
    seq = ctx.sequences[run.subject]
    estimates = simulate([r.drone for r in seq], replace(ctx.odometry, seed=run.seed))
    return [finetune_setting(ctx, s, run, estimates)[0] for s in settings]


def _guarded(job: Callable[[Run], list[dict]], run: Run) -> list[dict]:
    try:
        return job(run)
    except Exception as exc:  # reported per run; the plan continues
        log.warning("run %s/%d failed: %s", run.subject, run.fold, exc)
        return [{"subject": run.subject, "fold": run.fold, "seed": run.seed, "status": "failed", "error": repr(exc)}]


def run_plan(plan: ExperimentPlan, job: Callable[[Run], list[dict]], jobs: int = 1) -> list[dict]:
    """Rows of every run in plan order, whatever order workers finish in."""
    runs = plan.runs()
    guarded = partial(_guarded, job)
    if jobs > 1 and len(runs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(guarded, runs))
    else:
        results = [guarded(r) for r in runs]
    return [row for rows in results for row in rows]


# -- aggregation --------------------------------------------------------------


def mean_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float, float]:
    """Mean and a two-sided Student-t interval; the interval is nan for n < 2."""
    v = np.asarray(values, dtype=np.float64)
    m = float(v.mean())
    if len(v) < 2:
        return m, float("nan"), float("nan")
    half = stats.t.ppf(0.5 + level / 2, len(v) - 1) * v.std(ddof=1) / math.sqrt(len(v))
    return m, m - half, m + half


def aggregate(rows: Iterable[dict], by: Sequence[str], values: Sequence[str] = ("mae", "r2_mean", "baseline_mae")) -> list[dict]:
    """Mean and 95% CI of ``values`` over successful rows, grouped by ``by``."""
    groups: dict = {}
    for row in rows:
        if row.get("status") != "ok":
            continue
        groups.setdefault(tuple(row[k] for k in by), []).append(row)
    out = []
    for key, members in groups.items():
        agg = dict(zip(by, key))
        agg["n"] = len(members)
        for v in values:
            m, lo, hi = mean_ci([r[v] for r in members])
            agg[v], agg[f"{v}_ci_low"], agg[f"{v}_ci_high"] = m, lo, hi
        out.append(agg)
    return out


def write_rows(path, rows: Sequence[dict]) -> None:
    """CSV with the union of row keys in first-seen order; floats in ``repr``."""
    columns: list = []
    for row in rows:
        for k in row:
            if k not in columns:
                columns.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row.get(c) is None else _fmt(row.get(c)) for c in columns])


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -- sweeps -------------------------------------------------------------------


def acquisition_grid(
    sizes: Sequence[int] = SET_SIZES, rates: Sequence[float] = RATES, max_duration: float = MAX_DURATION
) -> tuple[list[Setting], list[dict]]:
    """Feasible (size, rate) settings and rows marking the infeasible ones."""
    feasible, infeasible = [], []
    for size in sizes:
        for rate in rates:
            duration = size / rate
            labels = (("point", f"{size}@{rate:g}Hz"),)
            if duration > max_duration + 1e-9:
                infeasible.append(
                    {"point": labels[0][1], "set_size": size, "rate": rate, "duration": duration, "status": "infeasible",
                     "error": f"needs {duration:g} s of flight, more than {max_duration:g} s"}
                )
            else:
                feasible.append(Setting(FinetuneSetSpec(duration, rate, size), labels=labels))
    return feasible, infeasible


def sweep_acquisition(
    ctx: Context, plan: ExperimentPlan, sizes=SET_SIZES, rates=RATES, jobs: int = 1
) -> list[dict]:
    settings, infeasible = acquisition_grid(sizes, rates)
    rows = run_plan(plan, partial(run_settings, ctx, settings), jobs)
    for run in plan.runs():
        for row in infeasible:
            rows.append({"subject": run.subject, "fold": run.fold, "seed": run.seed, **row})
    return rows


def compare_methods(
    ctx: Context, plan: ExperimentPlan, strategies=STRATEGIES, sizes=SET_SIZES, rate: float = 4.0, jobs: int = 1
) -> list[dict]:
    settings = [
        Setting(FinetuneSetSpec(size / rate, rate, size), strategy=s)
        for s in strategies
        for size in sizes
    ]
    return run_plan(plan, partial(run_settings, ctx, settings), jobs)


def loss_ladder(
    ctx: Context,
    plan: ExperimentPlan,
    scenarios=LADDER,
    dts: Sequence[float] = (0.5, 1.0, 2.0, 4.0),
    spec: FinetuneSetSpec = FinetuneSetSpec(),
    jobs: int = 1,
) -> list[dict]:
    """Scenario x dt grid; scenarios without a consistency term run once."""
    settings = []
    for sc in scenarios:
        grid = dts if LossScenario.parse(sc).sc_set is not None else (dts[0],)
        settings += [Setting(spec, scenario=sc, dt=dt) for dt in grid]
    return run_plan(plan, partial(run_settings, ctx, settings), jobs)


def dummy_mae(ctx: Context, subject: Optional[str] = None) -> float:
    """MAE of predicting each sequence's mean pose on that sequence."""
    subjects = [subject] if subject else sorted(ctx.sequences)
    vals = []
    for s in subjects:
        y = relative_array(ctx.sequences[s])
        centre = y.mean(axis=0)
        centre[3] = circular_mean(y[:, 3])
        vals.append(mae(np.broadcast_to(centre, y.shape), y))
    return float(np.mean(vals))
