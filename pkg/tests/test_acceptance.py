"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(see ``conftest.py``). The end-to-end criteria share one synthetic world: a
network pretrained on domain A and five cross-validation seeds over the three
domain-B subjects. A seed is one fold draw applied to every subject; its score
is the subject-mean test MAE against the subject-mean baseline MAE.
"""

import math
import time
from dataclasses import dataclass, replace

import numpy as np
import pytest

import oracles
import published
from nanotune import cost
from nanotune.data import FinetuneSetSpec, default_domains, detect_still, synth_generate, time_reverse
from nanotune.experiments import Context, ExperimentPlan, Setting, finetune_setting
from nanotune.losses import ConsistencyPair, LossScenario, build_pairs, build_task_samples, combined_loss, sc_loss
from nanotune.nn import PRESETS, count_selected_params, desk_descriptor, frontnet, reference_descriptor
from nanotune.odometry import OdomNoiseParams, relative_odometry, simulate
from nanotune.pose import IDENTITY, Pose4, compose, delta, invert
from nanotune.trainer import TrainConfig, finetune, pretrain
from test_cli import run_pipeline

RESULTS: dict = {}

SEEDS = 5
SUBJECTS = ("b0", "b1", "b2")


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def rel(a, b):
    return abs(a - b) / abs(b)


# -- 1. gradients ------------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {name: 0.0 for name in PRESETS}
    types, n = set(), 0
    while n < 24 or types != {"Conv2D", "BatchNorm", "ReLU", "MaxPool", "Flatten", "FullyConnected"}:
        arch = oracles.random_descriptor(rng)
        types |= oracles.layer_types(arch)
        for name, r in oracles.gradient_check(arch, seed=n).items():
            worst[name] = max(worst[name], r["error"])
        n += 1
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"{n} descriptors, worst relative error {detail}, {elapsed:.1f} s")


# -- 2. cost table -----------------------------------------------------------------------------


def test_criterion_2_cost_table():
    arch = reference_descriptor()
    fails = []
    if rel(cost.forward_macs(arch) / 1e6, published.FORWARD_MMAC) > 0.05:
        fails.append("forward")
    cells = []
    for name, (params_k, act_kb, step_mmac) in published.COST.items():
        s = PRESETS[name]
        p = count_selected_params(arch, s) / 1000
        a = cost.cost_report(arch, s).activation_kib
        m = cost.train_step_macs(arch, s).total / 1e6
        if rel(p, params_k) > 0.05:
            fails.append(f"{name} params {p:.1f}")
        if rel(a, act_kb) > (0.25 if name == "BiasOnly" else 0.10):
            fails.append(f"{name} activations {a:.2f}")
        if rel(m, step_mmac) > 0.10:
            fails.append(f"{name} step {m:.2f}")
        cells.append(f"{name} {p:.1f}k/{a:.1f}KB/{m:.1f}M")
    report(2, not fails, "; ".join(cells) + (f"; off: {fails}" if fails else ""))


# -- 3. runtime model --------------------------------------------------------------------------


def test_criterion_3_runtime_model():
    arch = reference_descriptor()
    meas = {soc: {"strategy": "AllWB", "set_size": 512, "time": published.TIMES[("AllWB", 512)][soc]} for soc in ("GAP9", "GAP8")}
    profiles = {p.name: p for p in cost.calibrate_socs(arch, meas)}
    worst = {}
    for soc, profile in profiles.items():
        errs = []
        for (strategy, n), times in published.TIMES.items():
            t = cost.estimate_time(cost.train_step_macs(arch, PRESETS[strategy]), n, 5, profile)
            errs.append(rel(t, cost.parse_duration(times[soc])))
        worst[soc] = max(errs)
    step_all = cost.train_step_macs(arch, PRESETS["AllWB"])
    ratio = cost.estimate_time(step_all, 512, 5, profiles["GAP9"]) / cost.estimate_time(step_all, 128, 5, profiles["GAP9"])
    mac_ratio = cost.train_step_macs(arch, PRESETS["BnWB"]).total / step_all.total
    measured_ratio = cost.parse_duration("1:29") / cost.parse_duration("2:03")
    ok = max(worst.values()) <= 0.10 and ratio == 4.0 and rel(measured_ratio, mac_ratio) <= 0.05
    report(
        3,
        ok,
        f"worst cell error GAP9 {worst['GAP9']:.1%} GAP8 {worst['GAP8']:.1%}; 512/128 ratio {ratio}; "
        f"BnWB/AllWB time {measured_ratio:.3f} vs MAC {mac_ratio:.3f}",
    )


# -- 4. loss invariants ------------------------------------------------------------------------


def random_pose(rng):
    return Pose4(*rng.uniform(-5, 5, 3), rng.uniform(-math.pi, math.pi))


def test_criterion_4_loss_invariants():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = {"sc": 0.0, "reversal": 0.0, "lambda": 0.0, "group": 0.0}
    for _ in range(2000):
        d_i, d_j, s_i, s_j = (random_pose(rng) for _ in range(4))
        pi, pj = compose(invert(d_i), s_i), compose(invert(d_j), s_j)
        odom, subj = compose(invert(d_i), d_j), compose(invert(s_i), s_j)
        worst["sc"] = max(worst["sc"], sc_loss(pi, pj, odom, subj))
        pair = ConsistencyPair(0, 1, odom, subj)
        back = time_reverse(time_reverse(pair))
        r = time_reverse(pair)
        worst["reversal"] = max(
            worst["reversal"], delta(back.odom, odom), delta(back.subj_rel, subj), sc_loss(pj, pi, r.odom, r.subj_rel)
        )
        a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
        worst["group"] = max(
            worst["group"],
            delta(compose(compose(a, b), c), compose(a, compose(b, c))),
            delta(compose(a, invert(a)), IDENTITY),
            delta(compose(IDENTITY, a), a),
        )
    for _ in range(200):
        tp, tt, pi, pj = (rng.normal(size=(4, 4)) for _ in range(4))
        pairs = [ConsistencyPair(k, k + 1, random_pose(rng), random_pose(rng)) for k in range(4)]
        lam = rng.uniform(0, 10)
        base = combined_loss(LossScenario("a", "a", "dD", "dH", lam=1.0), tp, tt, pi, pj, pairs)
        scaled = combined_loss(LossScenario("a", "a", "dD", "dH", lam=lam), tp, tt, pi, pj, pairs)
        worst["lambda"] = max(worst["lambda"], abs(scaled.total - (base.task + lam * base.sc)))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-9 and elapsed < 10
    report(4, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f} s")


# -- shared end-to-end world ----------------------------------------------------------------------

IDEAL = Setting(FinetuneSetSpec(128, 4), scenario="t(a)", labels=(("name", "ideal"),))
LADDER_SETTINGS = [
    Setting(FinetuneSetSpec(128, 4), scenario=s, dt=2.0, labels=(("name", s),))
    for s in ("sc(a,dD,dH)", "sc(a,dD~,H?)", "t(s32)+sc(a,dD~,H?)", "t(s32)+sc(s128,dD~,H?)")
]
ACQ_SETTINGS = [
    Setting(FinetuneSetSpec(128, 2, 256), labels=(("name", "256@2Hz"),)),
    Setting(FinetuneSetSpec(64, 4, 256), labels=(("name", "256@4Hz"),)),
    Setting(FinetuneSetSpec(8, 4, 32), labels=(("name", "32@4Hz"),)),
]


@dataclass
class EndToEnd:
    ctx: Context
    rows: list
    ideal_seconds: float
    setup_seconds: float

    def per_seed(self, name):
        """Subject-mean test MAE and baseline MAE for each seed."""
        out = []
        for f in range(SEEDS):
            rows = [r for r in self.rows if r.get("name") == name and r["fold"] == f]
            assert len(rows) == len(SUBJECTS) and all(r["status"] == "ok" for r in rows), (name, f, rows)
            out.append((np.mean([r["mae"] for r in rows]), np.mean([r["baseline_mae"] for r in rows])))
        return np.array(out)

    def improvements(self, name):
        s = self.per_seed(name)
        return 1.0 - s[:, 0] / s[:, 1]


@pytest.fixture(scope="module")
def e2e():
    start = time.perf_counter()
    dom_a, dom_b = default_domains(48, 80)
    recs_a, seqs = synth_generate(dom_a, dom_b, 2000, seed=0, n_a=5600)
    arch = desk_descriptor()
    cfg = TrainConfig(pretrain_epochs=20, seed=0)
    params, _ = pretrain(cfg, recs_a, arch)
    ctx = Context(params, seqs, cfg)
    setup = time.perf_counter() - start
    plan = ExperimentPlan(SUBJECTS, folds=SEEDS, seed=0)
    rows, ideal_seconds = [], 0.0
    for run in plan.runs():
        estimates = simulate([r.drone for r in seqs[run.subject]], replace(ctx.odometry, seed=run.seed))
        t0 = time.perf_counter()
        rows.append(finetune_setting(ctx, IDEAL, run, estimates)[0])
        ideal_seconds += time.perf_counter() - t0
        for s in LADDER_SETTINGS + ACQ_SETTINGS:
            rows.append(finetune_setting(ctx, s, run, estimates)[0])
    return EndToEnd(ctx, rows, ideal_seconds, setup)


# -- 5. domain shift ----------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_end_to_end_domain_shift(e2e):
    imp = e2e.improvements("ideal")
    wins = int((imp > 0).sum())
    minutes = (e2e.setup_seconds + e2e.ideal_seconds) / 60
    ok = wins >= 4 and np.median(imp) >= 0.20 and minutes < 15
    report(
        5,
        ok,
        f"improved in {wins}/5 seeds, median improvement {np.median(imp):.1%} "
        f"(per seed {', '.join(f'{v:.1%}' for v in imp)}); {minutes:.1f} min",
    )


# -- 6. self-supervision ladder -------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_self_supervision_ladder(e2e):
    ideal = np.median(e2e.improvements("ideal"))
    sc_known = np.median(e2e.improvements("sc(a,dD,dH)"))
    recovered = sc_known / ideal
    unknown = np.median(e2e.per_seed("sc(a,dD~,H?)")[:, 0])
    still = {name: np.median(e2e.per_seed(name)[:, 0]) for name in ("t(s32)+sc(a,dD~,H?)", "t(s32)+sc(s128,dD~,H?)")}
    # materially worse: above every still protocol and at least 5% above the best of them
    materially_worse = all(unknown > v for v in still.values()) and unknown >= 1.05 * min(still.values())
    subset = e2e.improvements("t(s32)+sc(s128,dD~,H?)")
    subset_wins = int((subset > 0).sum())
    ok = recovered >= 0.5 and materially_worse and subset_wins >= 4
    report(
        6,
        ok,
        f"sc(a,dD,dH) recovers {recovered:.0%} of ideal; unknown-moving median MAE {unknown:.3f} vs still protocols "
        + ", ".join(f"{k} {v:.3f}" for k, v in still.items())
        + f"; t(s32)+sc(s128) improves in {subset_wins}/5 seeds, {np.median(subset) / ideal:.0%} of ideal",
    )


# -- 7. acquisition trade-off ---------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_acquisition_tradeoff(e2e):
    slow = np.median(e2e.per_seed("256@2Hz")[:, 0])
    fast = np.median(e2e.per_seed("256@4Hz")[:, 0])
    big = np.median(e2e.per_seed("ideal")[:, 0])
    small = np.median(e2e.per_seed("32@4Hz")[:, 0])
    base = np.median(e2e.per_seed("ideal")[:, 1])
    ok = slow <= fast and big < small
    report(
        7,
        ok,
        f"256 samples: 128 s@2Hz {slow:.3f} vs 64 s@4Hz {fast:.3f}; 512 samples {big:.3f} vs 32 samples {small:.3f} "
        f"(baseline {base:.3f})",
    )


@pytest.mark.slow
def test_finetune_loss_trend(e2e):
    rows = [r for r in e2e.rows if r.get("status") == "ok"]
    down = sum(r["loss_nonincreasing"] for r in rows)
    total = sum(r["loss_transitions"] for r in rows)
    assert down >= 0.8 * total, (down, total)


# -- 8. freeze and reproducibility ----------------------------------------------------------------


def test_criterion_8_freeze_and_reproducibility(tmp_path):
    a, b = default_domains(24, 40)
    recs_a, seqs = synth_generate(a, b, 96, seed=2, n_a=200)
    arch = frontnet((1, 24, 40), (4, 8, 8, 8))
    params, _ = pretrain(TrainConfig(pretrain_epochs=1), recs_a, arch)
    ft = seqs["b0"]
    est = simulate([r.drone for r in ft], OdomNoiseParams(seed=1))
    still = detect_still(ft)
    leaks = []
    for strategy in (*PRESETS, "BiasOnly+FcWB"):
        for scenario in ("t(a)", "sc(a,dD~,dH)", "t(s32)+sc(s128,dD~,H?)"):
            sc = LossScenario.parse(scenario, dt=1.0)
            tasks = build_task_samples(ft, sc, est, still, np.random.default_rng(0))
            pairs = build_pairs(ft, 1.0, sc, est, still, np.random.default_rng(0))
            if not tasks and not pairs:
                continue
            cfg = TrainConfig(strategy=strategy, scenario=scenario, dt=1.0, finetune_epochs=2)
            model, _ = finetune(params, cfg, ft, tasks, pairs)
            s = cfg.update_strategy()
            free = set(s.selected_keys(arch))
            if s.bn_uses_batch_stats(arch):
                free |= {k for k in model.keys() if k[1].startswith("bn_running")}
            leaks += [(strategy, scenario, k) for k in model.keys() if k not in free and not np.array_equal(model[k], params[k])]
    first, second = run_pipeline(tmp_path / "first"), run_pipeline(tmp_path / "second")
    csvs = sorted(p.relative_to(first) for p in first.rglob("*.csv"))
    differing = [str(p) for p in csvs if (first / p).read_bytes() != (second / p).read_bytes()]
    ok = not leaks and not differing and len(csvs) >= 8
    report(8, ok, f"{len(leaks)} unselected tensors changed; {len(differing)} of {len(csvs)} CSVs differ on re-run")


# -- 9. odometry statistics ----------------------------------------------------------------------


def test_criterion_9_odometry_statistics():
    params = OdomNoiseParams(0.02, 0.03, 0.005, 0.04)
    pvals = oracles.odometry_variance_pvalues(params, n_traj=1000)
    worst = min(pvals.values())
    truth = [Pose4(0.1 * k, np.sin(k), 1.0, 0.05 * k) for k in range(100)]
    est = simulate(truth, OdomNoiseParams(0, 0, 0, 0))
    exact = est == truth and all(
        relative_odometry(est, i, i + 7) == compose(invert(truth[i]), truth[i + 7]) for i in range(90)
    )
    ok = worst > 1e-3 / len(pvals) and exact
    report(9, ok, f"min chi-square p-value {worst:.3g} over {len(pvals)} checks (1000 trajectories); zero noise exact: {exact}")
