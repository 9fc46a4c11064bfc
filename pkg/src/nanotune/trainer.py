"""Adam, pretraining and fine-tuning loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data.augment import AugmentConfig, flip_image, flip_pair, maybe_time_reverse, photometric
from .data.records import FlightRecord, images_array, relative_array
from .losses import ConsistencyPair, LossScenario, TaskSample, combined_loss, task_loss_and_grad
from .metrics import mae
from .nn.arch import ArchDescriptor
from .nn.engine import ModelParams, backward, forward, predict
from .nn.strategy import ALL_WB, UpdateStrategy, strategy_from_name
from .pose import flip_array

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    pretrain_epochs: int = 100
    finetune_epochs: int = 5
    strategy: str = "AllWB"
    scenario: str = "t(a)"
    dt: float = 2.0
    lam: float = 1.0
    inverse_target: bool = False
    bn_mode: str = "auto"
    bn_momentum: float = 0.1
    val_fraction: float = 0.1
    time_reversal: float = 0.5
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if not self.lr >= 0:
            raise ConfigError("learning rate must be >= 0")
        if self.pretrain_epochs < 1 or self.finetune_epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        strategy_from_name(self.strategy)
        self.loss_scenario()

    def update_strategy(self) -> UpdateStrategy:
        return strategy_from_name(self.strategy)

    def loss_scenario(self) -> LossScenario:
        return LossScenario.parse(self.scenario, dt=self.dt, lam=self.lam, inverse_target=self.inverse_target)


# -- optimiser ----------------------------------------------------------------


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: ModelParams, grads: dict, state: AdamState, config: TrainConfig
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update of the parameters present in ``grads``.

    Parameters without a gradient are not touched. Moments are kept in float64.
    """
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for key, g in grads.items():
        p = params[key]
        if g.shape != p.shape:
            raise ValueError(f"{key}: gradient shape {g.shape} != parameter shape {p.shape}")
        g = g.astype(np.float64)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros(p.shape)
            state.v[key] = np.zeros(p.shape)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        params[key] = (p - step).astype(p.dtype)
    return params, state


# -- batching helpers ---------------------------------------------------------


def _augmented(images: np.ndarray, labels: np.ndarray, rng, cfg: AugmentConfig):
    """Photometric augmentation plus random flips for ``(n, 1, h, w)`` images."""
    out = np.empty_like(images)
    labels = labels.copy()
    for k in range(len(images)):
        flipped = rng.random() < cfg.p_flip
        img = photometric(images[k, 0], rng, cfg)
        if flipped:
            img = flip_image(img)
            labels[k] = flip_array(labels[k])
        out[k, 0] = img
    return out, labels


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {what}: {value}")


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    best_epoch: Optional[int] = None


def pretrain(
    config: TrainConfig,
    records: Sequence[FlightRecord],
    arch: ArchDescriptor,
    init: Optional[ModelParams] = None,
) -> tuple[ModelParams, History]:
    """Supervised training of every parameter; returns the best-validation checkpoint."""
    if not records:
        raise ConfigError("empty pretraining set")
    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else ModelParams.init(arch, seed=config.seed)
    images = images_array(records)
    labels = relative_array(records)
    order = rng.permutation(len(records))
    n_val = int(round(config.val_fraction * len(records)))
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    state = AdamState()
    history = History()
    best: Optional[ModelParams] = None
    best_mae = math.inf
    for epoch in range(config.pretrain_epochs):
        perm = rng.permutation(train_idx)
        losses = []
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s : s + config.batch_size]
            x, y = _augmented(images[idx], labels[idx], rng, config.augment)
            pred, cache = forward(params, arch, x, "train", ALL_WB, momentum=config.bn_momentum)
            loss, g = task_loss_and_grad(pred.astype(np.float64), y)
            _check_finite(loss, f"training loss at epoch {epoch}")
            grads = backward(cache, g, ALL_WB, arch)
            adam_step(params, grads, state, config)
            losses.append(loss)
        history.train_loss.append(float(np.mean(losses)))
        if n_val:
            val = mae(predict(params, arch, images[val_idx]), labels[val_idx])
            _check_finite(val, f"validation MAE at epoch {epoch}")
            history.val_mae.append(val)
            if val < best_mae:
                best_mae, best, history.best_epoch = val, params.copy(), epoch
        log.info("pretrain epoch %d loss %.4f val %s", epoch, history.train_loss[-1], history.val_mae[-1:] or "-")
    return (best if best is not None else params), history


def finetune(
    params: ModelParams,
    config: TrainConfig,
    records: Sequence[FlightRecord],
    task_samples: Sequence[TaskSample] = (),
    pairs: Sequence[ConsistencyPair] = (),
) -> tuple[ModelParams, History]:
    """Minimise ``task + lam * sc`` for a fixed number of epochs; returns the final model.

    Indices in ``task_samples`` and ``pairs`` refer to positions in ``records``.
    Each epoch visits every task sample and every pair once, in freshly
    shuffled order, spreading both over the same number of optimiser steps.
    """
    if not records or (not task_samples and not pairs):
        raise ConfigError("empty fine-tuning set")
    arch = params.arch
    scenario = config.loss_scenario()
    strategy = config.update_strategy()
    params = params.copy()
    rng = np.random.default_rng(config.seed)
    images = images_array(records)
    targets = np.array([s.target.as_array() for s in task_samples]).reshape(-1, 4)
    t_index = np.array([s.i for s in task_samples], dtype=int)
    state = AdamState()
    history = History()
    n_t, n_p = len(task_samples), len(pairs)
    steps = max(1, math.ceil(max(n_t, n_p) / config.batch_size))
    cfg = config.augment
    for epoch in range(config.finetune_epochs):
        t_chunks = np.array_split(rng.permutation(n_t), steps)
        p_chunks = np.array_split(rng.permutation(n_p), steps)
        losses = []
        for tc, pc in zip(t_chunks, p_chunks):
            x_t, y_t = _augmented(images[t_index[tc]], targets[tc], rng, cfg)
            step_pairs, xs_i, xs_j = [], [], []
            for k in pc:
                pair = maybe_time_reverse(pairs[k], rng, config.time_reversal)
                a = photometric(images[pair.i, 0], rng, cfg)
                b = photometric(images[pair.j, 0], rng, cfg)
                if rng.random() < cfg.p_flip:
                    pair, a, b = flip_pair(pair), flip_image(a), flip_image(b)
                step_pairs.append(pair)
                xs_i.append(a)
                xs_j.append(b)
            n_pairs = len(step_pairs)
            batch = [x_t]
            if n_pairs:
                batch += [np.stack(xs_i)[:, None], np.stack(xs_j)[:, None]]
            x = np.concatenate(batch)
            if len(x) == 0:
                continue
            pred, cache = forward(
                params, arch, x, "train", strategy, bn_mode=config.bn_mode, momentum=config.bn_momentum
            )
            pred = pred.astype(np.float64)
            nt = len(tc)
            value = combined_loss(
                scenario,
                pred[:nt] if nt else None,
                y_t if nt else None,
                pred[nt : nt + n_pairs] if n_pairs else None,
                pred[nt + n_pairs :] if n_pairs else None,
                step_pairs,
            )
            _check_finite(value.total, f"fine-tuning loss at epoch {epoch}")
            upstream = np.zeros_like(pred)
            if value.grad_task is not None:
                upstream[:nt] = value.grad_task
            if value.grad_i is not None:
                upstream[nt : nt + n_pairs] = value.grad_i
                upstream[nt + n_pairs :] = value.grad_j
            grads = backward(cache, upstream, strategy, arch)
            adam_step(params, grads, state, config)
            losses.append(value.total)
        history.train_loss.append(float(np.mean(losses)) if losses else float("nan"))
    return params, history
