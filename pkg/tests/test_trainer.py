import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from nanotune.data import FinetuneSetSpec, images_array, relative_array
from nanotune.experiments import (
    Context,
    ExperimentPlan,
    Setting,
    acquisition_grid,
    aggregate,
    dummy_mae,
    finetune_setting,
    mean_ci,
    read_rows,
    run_plan,
    run_settings,
    write_rows,
)
from nanotune.losses import LossScenario, build_task_samples
from nanotune.metrics import mae
from nanotune.nn import predict
from nanotune.trainer import AdamState, ConfigError, DivergenceError, TrainConfig, adam_step, finetune, pretrain


def textbook_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


# -- optimiser --------------------------------------------------------------------------------


def adam_params(tiny_world):
    return tiny_world.params.astype(np.float64)


def test_adam_matches_reference_recursion(tiny_world):
    params = adam_params(tiny_world)
    key = next(k for k in params.keys() if k[1] == "fc_weight")
    start = params[key].copy()
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=start.shape) for _ in range(5)]
    state = AdamState()
    cfg = TrainConfig(lr=0.01)
    for g in grads:
        adam_step(params, {key: g}, state, cfg)
    np.testing.assert_allclose(params[key], textbook_adam(start, grads, 0.01), rtol=1e-12, atol=1e-15)


def test_adam_examples(tiny_world):
    params = adam_params(tiny_world)
    key = next(k for k in params.keys() if k[1] == "fc_bias")
    other = next(k for k in params.keys() if k[1] == "conv_weight")
    before = params.copy()
    cfg = TrainConfig(lr=1e-3)
    adam_step(params, {key: np.zeros_like(params[key])}, AdamState(), cfg)
    np.testing.assert_array_equal(params[key], before[key])
    adam_step(params, {key: np.ones_like(params[key])}, AdamState(), cfg)
    np.testing.assert_allclose(params[key] - before[key], -1e-3, rtol=1e-6)
    np.testing.assert_array_equal(params[other], before[other])
    with pytest.raises(ValueError):
        adam_step(params, {key: np.ones(7)}, AdamState(), cfg)


# -- configuration --------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [dict(finetune_epochs=0), dict(pretrain_epochs=0), dict(lr=-1), dict(batch_size=0), dict(val_fraction=1.0),
     dict(strategy="Nope"), dict(scenario="t(q)")],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# -- training loops ---------------------------------------------------------------------------


def ft_data(world, subject="b0", n=64):
    recs = world.sequences[subject][:n]
    tasks = build_task_samples(recs, LossScenario())
    return recs, tasks


def test_pretrain_beats_dummy_predictor(tiny_world):
    held = tiny_world.domain_a[-100:]
    y = relative_array(held)
    centre = y.mean(axis=0)
    assert mae(predict(tiny_world.params, tiny_world.arch, images_array(held)), y) < 0.8 * mae(np.tile(centre, (100, 1)), y)


def test_pretrain_is_deterministic(tiny_world):
    cfg = replace(tiny_world.config, pretrain_epochs=1)
    recs = tiny_world.domain_a[:100]
    a, ha = pretrain(cfg, recs, tiny_world.arch)
    b, hb = pretrain(cfg, recs, tiny_world.arch)
    assert a.equal(b) and ha.train_loss == hb.train_loss


def test_pretrain_detects_divergence(tiny_world):
    bad = tiny_world.params.copy()
    key = next(k for k in bad.keys() if k[1] == "fc_weight")
    bad[key] = np.full_like(bad[key], np.nan)
    with pytest.raises(DivergenceError):
        pretrain(replace(tiny_world.config, pretrain_epochs=1), tiny_world.domain_a[:40], tiny_world.arch, init=bad)
    with pytest.raises(ConfigError):
        pretrain(tiny_world.config, [], tiny_world.arch)


@pytest.mark.parametrize("strategy", ["FcWB", "BnWB", "BiasOnly", "BiasOnly+FcWB"])
def test_unselected_parameters_stay_bit_identical(tiny_world, strategy):
    recs, tasks = ft_data(tiny_world)
    cfg = replace(tiny_world.config, strategy=strategy, finetune_epochs=2)
    model, _ = finetune(tiny_world.params, cfg, recs, tasks)
    selected = set(cfg.update_strategy().selected_keys(tiny_world.arch))
    changed = {k for k in model.keys() if not np.array_equal(model[k], tiny_world.params[k])}
    assert changed
    # running statistics may move only when batch statistics are in use
    stats_move = cfg.update_strategy().bn_uses_batch_stats(tiny_world.arch)
    allowed = selected | ({k for k in model.keys() if k[1].startswith("bn_running")} if stats_move else set())
    assert changed <= allowed


def test_zero_learning_rate_leaves_model_unchanged(tiny_world):
    recs, tasks = ft_data(tiny_world)
    cfg = replace(tiny_world.config, lr=0.0, bn_momentum=0.0, finetune_epochs=1)
    model, _ = finetune(tiny_world.params, cfg, recs, tasks)
    assert model.equal(tiny_world.params)


def test_finetune_is_deterministic_and_reduces_loss(tiny_world):
    recs, tasks = ft_data(tiny_world, n=128)
    cfg = replace(tiny_world.config, finetune_epochs=4, seed=3)
    a, ha = finetune(tiny_world.params, cfg, recs, tasks)
    b, hb = finetune(tiny_world.params, cfg, recs, tasks)
    assert a.equal(b)
    assert ha.train_loss == hb.train_loss
    assert ha.train_loss[-1] < ha.train_loss[0]


def test_finetune_with_consistency_pairs(tiny_world):
    from nanotune.losses import build_pairs

    recs = tiny_world.sequences["b1"][:80]
    sc = LossScenario.parse("sc(a,dD,dH)", dt=1.0)
    pairs = build_pairs(recs, 1.0, sc)
    cfg = replace(tiny_world.config, scenario="sc(a,dD,dH)", dt=1.0, finetune_epochs=1)
    model, hist = finetune(tiny_world.params, cfg, recs, (), pairs)
    assert math.isfinite(hist.train_loss[0])
    assert not model.equal(tiny_world.params)


def test_finetune_rejects_empty_sets(tiny_world):
    recs, _ = ft_data(tiny_world)
    with pytest.raises(ConfigError):
        finetune(tiny_world.params, tiny_world.config, recs)
    with pytest.raises(ConfigError):
        finetune(tiny_world.params, tiny_world.config, [], ())


# -- plans and aggregation --------------------------------------------------------------------


def context(world, **kw):
    return Context(world.params, world.sequences, replace(world.config, finetune_epochs=1), gap=20, **kw)


def test_plan_seeds_are_distinct_and_stable():
    runs = ExperimentPlan(("b0", "b1", "b2"), folds=3, seed=5).runs()
    assert len(runs) == 9
    assert len({r.seed for r in runs}) == 9
    assert runs == ExperimentPlan(("b0", "b1", "b2"), folds=3, seed=5).runs()
    assert runs != ExperimentPlan(("b0", "b1", "b2"), folds=3, seed=6).runs()


def test_run_plan_collects_rows_in_order(tiny_world):
    ctx = context(tiny_world)
    plan = ExperimentPlan(("b0", "b1", "b2"), folds=3)
    settings = [Setting(FinetuneSetSpec(8, 4, 32))]
    serial = run_plan(plan, lambda run: run_settings(ctx, settings, run))
    assert len(serial) == 9
    assert [(r["subject"], r["fold"]) for r in serial] == [(r.subject, r.fold) for r in plan.runs()]
    assert all(r["status"] == "ok" for r in serial)


def test_parallel_plan_matches_serial(tiny_world):
    from functools import partial

    ctx = context(tiny_world)
    plan = ExperimentPlan(("b0", "b2"), folds=1)
    job = partial(run_settings, ctx, [Setting(FinetuneSetSpec(8, 4, 32))])
    assert run_plan(plan, job, jobs=2) == run_plan(plan, job, jobs=1)


def test_failures_are_reported_per_run(tiny_world):
    ctx = context(tiny_world)

    def job(run):
        if run.subject == "b1":
            raise RuntimeError("boom")
        return run_settings(ctx, [Setting(FinetuneSetSpec(8, 4, 32))], run)

    rows = run_plan(ExperimentPlan(("b0", "b1"), folds=2), job)
    assert [r["status"] for r in rows] == ["ok", "ok", "failed", "failed"]
    assert "boom" in rows[2]["error"]


def test_infeasible_settings_yield_rows(tiny_world):
    ctx = context(tiny_world)
    run = ExperimentPlan(("b0",), folds=1).runs()[0]
    row, model = finetune_setting(ctx, Setting(FinetuneSetSpec(128, 3)), run)
    assert row["status"] == "infeasible" and model is None
    # the segment is capped at 75% of the flight, but no gap leaves room for a test set
    row, _ = finetune_setting(replace(ctx, gap=400), Setting(FinetuneSetSpec(128, 4)), run)
    assert row["status"] == "infeasible"


def test_finetune_row_fields(tiny_world):
    ctx = context(tiny_world)
    run = ExperimentPlan(("b0",), folds=1).runs()[0]
    row, model = finetune_setting(ctx, Setting(FinetuneSetSpec(16, 4, 64)), run)
    assert row["status"] == "ok"
    assert row["n_finetune"] == 64 and row["n_task"] == 64
    assert row["improvement"] == pytest.approx(1 - row["mae"] / row["baseline_mae"])
    assert row["mae"] == pytest.approx(np.mean([row[f"mae_{c}"] for c in "xyz"] + [row["mae_yaw"]]))


def test_mean_ci_matches_scipy_interval():
    v = [0.3, 0.5, 0.4, 0.45, 0.38]
    m, lo, hi = mean_ci(v)
    ref = stats.t.interval(0.95, len(v) - 1, loc=np.mean(v), scale=stats.sem(v))
    assert m == pytest.approx(np.mean(v))
    assert (lo, hi) == pytest.approx(ref)
    assert math.isnan(mean_ci([1.0])[1])


def test_aggregate_and_round_trip(tmp_path):
    rows = [
        {"strategy": s, "status": "ok", "mae": m, "r2_mean": 0.0, "baseline_mae": 1.0}
        for s, m in [("A", 0.1), ("A", 0.3), ("B", 0.5)]
    ] + [{"strategy": "A", "status": "failed"}]
    agg = {r["strategy"]: r for r in aggregate(rows, ["strategy"])}
    assert agg["A"]["n"] == 2 and agg["A"]["mae"] == pytest.approx(0.2)
    write_rows(tmp_path / "r.csv", rows)
    back = read_rows(tmp_path / "r.csv")
    assert float(back[0]["mae"]) == 0.1 and back[3]["mae"] == ""


def test_acquisition_grid_marks_long_flights():
    feasible, infeasible = acquisition_grid()
    assert len(feasible) + len(infeasible) == 20
    assert {r["point"] for r in infeasible} == {"128@0.5Hz", "256@1Hz", "256@0.5Hz", "512@2Hz", "512@1Hz", "512@0.5Hz"}
    assert all(s.spec.segment_duration <= 128 for s in feasible)


def test_dummy_mae(tiny_world):
    ctx = context(tiny_world)
    assert dummy_mae(ctx) == pytest.approx(np.mean([dummy_mae(ctx, s) for s in ("b0", "b1", "b2")]))
