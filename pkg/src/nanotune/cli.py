"""Command-line entry point: ``nanotune <command> [--config F] [--seed N] [--out DIR] [--jobs N]``.

Exit codes: 0 success, 2 configuration error, 3 data ingestion error,
4 run failure. Per-point failures inside sweeps are recorded in the CSV and
do not change the exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Optional

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .cost import calibrate_socs, cost_report, format_duration, forward_macs, total_params
from .data.acquisition import FinetuneSetSpec
from .data.records import IngestionError, images_array, load_sequence, relative_array, save_sequence
from .data.synth import synth_generate
from .experiments import (
    Context,
    ExperimentPlan,
    Setting,
    aggregate,
    compare_methods,
    finetune_setting,
    loss_ladder,
    sweep_acquisition,
    write_rows,
)
from .metrics import evaluate, write_r2_matrix
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.engine import predict
from .nn.strategy import strategy_from_name
from .plots import render_csv
from .trainer import pretrain

log = logging.getLogger("nanotune")

EXIT_OK, EXIT_CONFIG, EXIT_INGEST, EXIT_RUN = 0, 2, 3, 4


class _Outputs:
    """Collects written files for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.note(p)
        return p

    def note(self, p: Path) -> None:
        p = Path(p)
        try:
            self.files.append(str(p.relative_to(self.root)))
        except ValueError:
            self.files.append(str(p))


def _data_dirs(cfg: ExperimentConfig, out: Path) -> tuple[Path, Path]:
    a = Path(cfg.data.domain_a) if cfg.data.domain_a else out / "data" / "domain_a"
    b = Path(cfg.data.domain_b) if cfg.data.domain_b else out / "data" / "domain_b"
    return a, b


def _checkpoint_dir(cfg: ExperimentConfig, out: Path) -> Path:
    return Path(cfg.finetune.checkpoint) if cfg.finetune.checkpoint else out / "checkpoints" / "pretrained"


def _load_domain_b(cfg: ExperimentConfig, out: Path) -> dict:
    _, b = _data_dirs(cfg, out)
    return {s: load_sequence(b / s) for s in cfg.plan.subjects}


def _load_model(cfg: ExperimentConfig, out: Path):
    path = _checkpoint_dir(cfg, out)
    if not (path / "manifest.json").is_file():
        raise IngestionError(f"no checkpoint at {path}; run `pretrain` first or set finetune.checkpoint")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, OSError) as exc:
        raise IngestionError(f"corrupt checkpoint at {path}: {exc}") from exc


def _context(cfg: ExperimentConfig, out: Path) -> Context:
    return Context(
        params=_load_model(cfg, out),
        sequences=_load_domain_b(cfg, out),
        train=cfg.train_config(),
        odometry=cfg.odometry_params(),
        gap=cfg.finetune.gap,
        max_fraction=cfg.finetune.max_fraction,
        v_max=cfg.still.v_max,
        t_min=cfg.still.t_min,
    )


def _plan(cfg: ExperimentConfig) -> ExperimentPlan:
    return ExperimentPlan(tuple(cfg.plan.subjects), cfg.plan.folds, cfg.seed)


# -- commands -------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig, out: _Outputs) -> None:
    dom_a, dom_b = cfg.domains()
    a, b = synth_generate(dom_a, dom_b, cfg.synth.n_b, cfg.seed, n_a=cfg.synth.n_a)
    dir_a, dir_b = _data_dirs(cfg, out.root)
    save_sequence(dir_a, a)
    out.note(dir_a)
    for sid, seq in b.items():
        save_sequence(dir_b / sid, seq)
        out.note(dir_b / sid)
    log.info("wrote %d domain-A frames and %d domain-B sequences", len(a), len(b))


def cmd_pretrain(cfg: ExperimentConfig, out: _Outputs) -> None:
    dir_a, _ = _data_dirs(cfg, out.root)
    records = load_sequence(dir_a)
    arch = cfg.arch_descriptor()
    params, history = pretrain(cfg.train_config(), records, arch)
    ckpt = out.root / "checkpoints" / "pretrained"
    save_checkpoint(ckpt, params, {"best_epoch": history.best_epoch, "seed": cfg.seed})
    out.note(ckpt)
    rows = [
        {"epoch": e, "train_loss": l, "val_mae": history.val_mae[e] if e < len(history.val_mae) else None}
        for e, l in enumerate(history.train_loss)
    ]
    write_rows(out.path("pretrain_history.csv"), rows)


def cmd_finetune(cfg: ExperimentConfig, out: _Outputs) -> None:
    ctx = _context(cfg, out.root)
    f = cfg.finetune
    run = next(
        (r for r in _plan(cfg).runs() if r.subject == f.subject and r.fold == f.fold),
        None,
    )
    if run is None:
        raise ConfigError(f"({f.subject}, fold {f.fold}) is not part of the plan")
    tc = ctx.train
    setting = Setting(FinetuneSetSpec(f.duration, f.rate, f.max_samples), tc.strategy, tc.scenario, tc.dt)
    row, model = finetune_setting(ctx, setting, run)
    if row.get("status") != "ok":
        raise RuntimeError(f"fine-tuning {row.get('status')}: {row.get('error')}")
    ckpt = out.root / "checkpoints" / f"finetuned-{f.subject}-{f.fold}"
    save_checkpoint(ckpt, model, {"subject": f.subject, "fold": f.fold, "seed": run.seed})
    out.note(ckpt)
    write_rows(out.path("finetune.csv"), [row])


def cmd_eval(cfg: ExperimentConfig, out: _Outputs) -> None:
    model = _load_model(cfg, out.root)
    seqs = _load_domain_b(cfg, out.root)
    source = cfg.finetune.checkpoint or "pretrained"
    rows, matrix = [], []
    for sid, seq in seqs.items():
        rep = evaluate(predict(model, model.arch, images_array(seq)), relative_array(seq))
        rows.append({"checkpoint": source, "subject": sid, **rep.row()})
        matrix.append((Path(source).name, sid, rep.r2))
    write_rows(out.path("eval.csv"), rows)
    write_r2_matrix(out.path("r2_matrix.csv"), matrix)


def _sweep_outputs(out: _Outputs, name: str, rows, by, x, series, title, log_x=True) -> None:
    write_rows(out.path(f"{name}.csv"), rows)
    agg_path = out.path(f"{name}_summary.csv")
    write_rows(agg_path, aggregate(rows, by))
    render_csv(agg_path, out.path(f"{name}.svg"), x=x, series=series, title=title, log_x=log_x)


def cmd_sweep_acquisition(cfg: ExperimentConfig, out: _Outputs) -> None:
    ctx = _context(cfg, out.root)
    rows = sweep_acquisition(ctx, _plan(cfg), cfg.sweep.sizes, cfg.sweep.rates, cfg.jobs)
    _sweep_outputs(out, "acquisition", rows, ("set_size", "rate"), "set_size", "rate", "MAE vs set size per rate")


def cmd_compare_methods(cfg: ExperimentConfig, out: _Outputs) -> None:
    ctx = _context(cfg, out.root)
    rows = compare_methods(ctx, _plan(cfg), cfg.sweep.strategies, cfg.sweep.sizes, jobs=cfg.jobs)
    _sweep_outputs(out, "methods", rows, ("strategy", "set_size"), "set_size", "strategy", "MAE vs set size per strategy")


def cmd_loss_ladder(cfg: ExperimentConfig, out: _Outputs) -> None:
    ctx = _context(cfg, out.root)
    f = cfg.finetune
    spec = FinetuneSetSpec(f.duration, f.rate, f.max_samples)
    rows = loss_ladder(ctx, _plan(cfg), cfg.sweep.scenarios, cfg.sweep.dts, spec, jobs=cfg.jobs)
    _sweep_outputs(out, "ladder", rows, ("scenario", "dt"), "dt", "scenario", "MAE vs dt per scenario")


def cost_rows(cfg: ExperimentConfig) -> list[dict]:
    arch = cfg.arch_descriptor(cfg.cost.arch)
    c = cfg.cost
    socs = calibrate_socs(arch, c.calibration, c.epochs)
    rows = []
    for name in c.strategies:
        strat = strategy_from_name(name)
        if not strat.selected_keys(arch):
            continue
        rep = cost_report(arch, strat, socs, c.set_sizes, c.epochs, name)
        row = {
            "strategy": name,
            "params": rep.params,
            "params_pct": rep.params_pct,
            "activation_kib": rep.activation_kib,
            "activation_bytes_f32": rep.activation_bytes,
            "mask_bytes": rep.mask_bytes,
            "forward_mmac": forward_macs(arch) / 1e6,
            "train_step_mmac": rep.step.total / 1e6,
        }
        for (soc, n), sec in rep.times.items():
            row[f"{soc}_{n}_s"] = sec
            row[f"{soc}_{n}"] = format_duration(sec)
        rows.append(row)
    return rows


def cmd_cost(cfg: ExperimentConfig, out: _Outputs) -> None:
    rows = cost_rows(cfg)
    write_rows(out.path("cost.csv"), rows)
    arch = cfg.arch_descriptor(cfg.cost.arch)
    print(f"{arch.name}: {total_params(arch)} parameters, {forward_macs(arch) / 1e6:.2f} MMAC forward")
    for r in rows:
        times = "  ".join(f"{k}={v}" for k, v in r.items() if isinstance(v, str) and k != "strategy")
        print(
            f"{r['strategy']:>9}  params {r['params']:>7}  act {r['activation_kib']:7.2f} KiB  "
            f"step {r['train_step_mmac']:6.2f} MMAC  {times}"
        )


COMMANDS: dict[str, Callable[[ExperimentConfig, _Outputs], None]] = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "sweep-acquisition": cmd_sweep_acquisition,
    "compare-methods": cmd_compare_methods,
    "loss-ladder": cmd_loss_ladder,
    "cost": cmd_cost,
}


def _write_manifest(root: Path, command: str, cfg: ExperimentConfig, files: list[str]) -> None:
    path = root / "manifest.json"
    manifest = {"tool": "nanotune", "version": __version__, "commands": {}}
    if path.is_file():
        try:
            manifest["commands"] = json.loads(path.read_text(encoding="utf-8")).get("commands", {})
        except json.JSONDecodeError:
            pass
    manifest["commands"][command] = {
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "outputs": sorted(set(files)),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nanotune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML experiment config")
        s.add_argument("--seed", type=int, help="global seed (overrides config)")
        s.add_argument("--out", help="output directory (overrides config)")
        s.add_argument("--jobs", type=int, help="worker processes for independent runs")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    root = Path(cfg.out or "nanotune-out")
    out = _Outputs(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IngestionError as exc:
        print(f"ingestion error: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except Exception as exc:
        log.debug("run failure", exc_info=True)
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    _write_manifest(root, args.command, cfg, out.files)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
