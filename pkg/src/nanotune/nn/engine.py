"""Forward and backward passes with strategy-aware activation retention.

The training forward pass keeps only what the backward pass of the active
:class:`UpdateStrategy` will read:

* conv / fc inputs, when that layer's weight is trained;
* batch-norm inputs, when the layer normalises with batch statistics and a
  gradient has to flow through it (or its scale is trained);
* per-channel batch-norm mean and inverse std for every batch norm the
  backward pass visits;
* ReLU sign masks and max-pool argmax indices along the backward path.

The backward pass stops at the earliest layer holding a selected parameter, so
``fc (w+b)`` never touches the convolutional trunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .arch import (
    ArchDescriptor,
    BatchNorm,
    Conv2D,
    DescriptorError,
    Flatten,
    FullyConnected,
    MaxPool,
    ReLU,
)
from .strategy import UpdateStrategy

BnMode = Literal["auto", "batch", "frozen"]


class ParameterCorruptionError(ValueError):
    pass


class ContractError(RuntimeError):
    """Backward called with a cache that does not belong to it."""


class ModelParams:
    """Flat parameter store keyed by ``(layer index, role)``."""

    def __init__(self, arch: ArchDescriptor, tensors: dict[tuple[int, str], np.ndarray]):
        self.arch = arch
        self.tensors = tensors
        expected = arch.param_shapes()
        if set(expected) != set(tensors):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise DescriptorError(f"parameter keys mismatch: missing={missing} extra={extra}")
        for key, shape in expected.items():
            if tuple(tensors[key].shape) != shape:
                raise DescriptorError(f"{key}: shape {tensors[key].shape} != {shape}")

    @classmethod
    def init(cls, arch: ArchDescriptor, seed: int = 0, dtype=np.float32) -> ModelParams:
        rng = np.random.default_rng(seed)
        tensors: dict[tuple[int, str], np.ndarray] = {}
        for (i, role), shape in arch.param_shapes().items():
            if role in ("conv_weight", "fc_weight"):
                fan_in = int(np.prod(shape[1:]))
                # ReLU follows convolutions, the regression head is linear
                bound = np.sqrt(6.0 / fan_in) if role == "conv_weight" else np.sqrt(1.0 / fan_in)
                t = rng.uniform(-bound, bound, size=shape)
            elif role in ("bn_gamma", "bn_running_var"):
                t = np.ones(shape)
            else:
                t = np.zeros(shape)
            tensors[(i, role)] = t.astype(dtype)
        return cls(arch, tensors)

    @classmethod
    def zeros(cls, arch: ArchDescriptor, dtype=np.float32) -> ModelParams:
        tensors = {}
        for key, shape in arch.param_shapes().items():
            fill = 1.0 if key[1] == "bn_running_var" else 0.0
            tensors[key] = np.full(shape, fill, dtype=dtype)
        return cls(arch, tensors)

    def __getitem__(self, key: tuple[int, str]) -> np.ndarray:
        return self.tensors[key]

    def __setitem__(self, key: tuple[int, str], value: np.ndarray) -> None:
        self.tensors[key] = value

    def keys(self):
        return self.tensors.keys()

    def copy(self) -> ModelParams:
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> ModelParams:
        return ModelParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype if self.tensors else np.dtype(np.float32)

    def equal(self, other: ModelParams) -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )


@dataclass
class ActivationCache:
    """Tensors retained by a training forward pass.

    ``activations`` hold per-frame float tensors (leading batch axis),
    ``stats`` per-channel batch-norm statistics shared by the batch, and
    ``masks`` ReLU signs (bool) and pool argmax indices (uint8).
    """

    strategy: UpdateStrategy
    batch_size: int
    stop_layer: int
    batch_stats: bool
    activations: dict[int, np.ndarray] = field(default_factory=dict)
    stats: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    in_shapes: dict[int, tuple[int, ...]] = field(default_factory=dict)
    weights: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)

    def activation_elements(self) -> int:
        return sum(a.size for a in self.activations.values()) + sum(
            m.size + s.size for m, s in self.stats.values()
        )

    def activation_bytes(self) -> int:
        return sum(a.nbytes for a in self.activations.values()) + sum(
            m.nbytes + s.nbytes for m, s in self.stats.values()
        )

    def mask_bytes(self) -> int:
        return sum(m.nbytes for m in self.masks.values())


def backward_start(arch: ArchDescriptor, strategy: UpdateStrategy) -> int:
    """Earliest layer whose parameters are selected; ``len(layers)`` if none."""
    keys = strategy.selected_keys(arch)
    return min((k[0] for k in keys), default=len(arch.layers))


def _resolve_batch_stats(arch, strategy, bn_mode: BnMode) -> bool:
    if bn_mode == "auto":
        return strategy.bn_uses_batch_stats(arch)
    if bn_mode not in ("batch", "frozen"):
        raise ValueError(f"bn_mode must be auto|batch|frozen, got {bn_mode!r}")
    return bn_mode == "batch"


# -- layer kernels ------------------------------------------------------------


def _windows(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def conv_forward(x, w, b, stride, pad):
    k = w.shape[2]
    win = _windows(x, k, stride, pad)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv_weight_grad(x, dy, k, stride, pad):
    win = _windows(x, k, stride, pad)
    return np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))


def conv_input_grad(dy, w, in_shape, stride, pad):
    n = dy.shape[0]
    c, h, wd = in_shape
    k = w.shape[2]
    ho, wo = dy.shape[2], dy.shape[3]
    cols = np.tensordot(dy, w, axes=([1], [0]))  # (n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dy.dtype)
    for a in range(k):
        for bb in range(k):
            dxp[:, :, a : a + stride * ho : stride, bb : bb + stride * wo : stride] += (
                cols[:, :, :, :, a, bb].transpose(0, 3, 1, 2)
            )
    if pad:
        dxp = dxp[:, :, pad : pad + h, pad : pad + wd]
    return np.ascontiguousarray(dxp)


def _sum64(a: np.ndarray, axes) -> np.ndarray:
    return a.sum(axis=axes, dtype=np.float64)


def maxpool_forward(x, k, s):
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    flat = win.reshape(*win.shape[:4], k * k)
    idx = flat.argmax(axis=-1)  # first maximum wins
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.uint8)


def maxpool_backward(dy, idx, in_shape, k, s):
    n = dy.shape[0]
    c, h, w = in_shape
    ho, wo = dy.shape[2], dy.shape[3]
    dx = np.zeros((n, c, h, w), dtype=dy.dtype)
    for a in range(k):
        for b in range(k):
            sel = idx == a * k + b
            dx[:, :, a : a + s * ho : s, b : b + s * wo : s] += np.where(sel, dy, 0)
    return dx


# -- forward / backward -------------------------------------------------------


def forward(
    params: ModelParams,
    arch: ArchDescriptor,
    batch: np.ndarray,
    mode: Literal["train", "eval"] = "eval",
    strategy: Optional[UpdateStrategy] = None,
    bn_mode: BnMode = "auto",
    momentum: float = 0.1,
) -> tuple[np.ndarray, Optional[ActivationCache]]:
    """Run the network on ``batch`` of shape ``(n, c, h, w)``.

    Inputs are expected in [0, 1]. Returns ``(predictions, cache)`` where
    predictions has shape ``(n, 4)`` as ``(x, y, z, yaw)``. In eval mode batch
    norm uses running statistics and ``cache`` is ``None``. In train mode with
    batch statistics the running statistics in ``params`` are updated in place
    with the given momentum (``momentum=0`` leaves them untouched).
    """
    dtype = params.dtype
    x = np.asarray(batch, dtype=dtype)
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1:] != arch.input_shape:
        raise DescriptorError(f"batch shape {x.shape[1:]} != descriptor input {arch.input_shape}")
    train = mode == "train"
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train|eval, got {mode!r}")
    cache = None
    if train:
        if strategy is None:
            raise ValueError("train-mode forward needs an update strategy")
        batch_stats = _resolve_batch_stats(arch, strategy, bn_mode)
        stop = backward_start(arch, strategy)
        cache = ActivationCache(strategy, x.shape[0], stop, batch_stats)
    else:
        batch_stats = False
        stop = len(arch.layers)

    for i, layer in enumerate(arch.layers):
        on_path = train and i >= stop
        if on_path:
            cache.in_shapes[i] = x.shape[1:]
        if isinstance(layer, Conv2D):
            w = params[(i, "conv_weight")]
            b = params[(i, "conv_bias")] if layer.bias else None
            if on_path and strategy.selects(i, "conv_weight"):
                cache.activations[i] = x
            if on_path:
                cache.weights[(i, "conv_weight")] = w
            x = conv_forward(x, w, b, layer.stride, layer.padding)
        elif isinstance(layer, BatchNorm):
            gamma = params[(i, "bn_gamma")]
            beta = params[(i, "bn_beta")]
            rvar = params[(i, "bn_running_var")]
            if np.any(rvar <= 0) or not np.all(np.isfinite(rvar)):
                raise ParameterCorruptionError(f"layer {i}: non-positive running variance")
            if batch_stats:
                m = x.shape[0] * x.shape[2] * x.shape[3]
                mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
                var = ((x - mean[None, :, None, None].astype(dtype)) ** 2).mean(
                    axis=(0, 2, 3), dtype=np.float64
                )
                if momentum:
                    unbiased = var * m / max(m - 1, 1)
                    rm = params[(i, "bn_running_mean")]
                    params[(i, "bn_running_mean")] = ((1 - momentum) * rm + momentum * mean).astype(dtype)
                    params[(i, "bn_running_var")] = ((1 - momentum) * rvar + momentum * unbiased).astype(dtype)
            else:
                mean = params[(i, "bn_running_mean")].astype(np.float64)
                var = rvar.astype(np.float64)
            invstd = 1.0 / np.sqrt(var + layer.eps)
            mean = mean.astype(dtype)
            invstd = invstd.astype(dtype)
            if on_path:
                cache.stats[i] = (mean, invstd)
                needs_input = strategy.selects(i, "bn_gamma") or (batch_stats and i > stop)
                if needs_input:
                    cache.activations[i] = x
                cache.weights[(i, "bn_gamma")] = gamma
            xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
            x = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
        elif isinstance(layer, ReLU):
            mask = x > 0
            if on_path:
                cache.masks[i] = mask
            x = np.where(mask, x, 0).astype(dtype, copy=False)
        elif isinstance(layer, MaxPool):
            x, idx = maxpool_forward(x, layer.kernel, layer.stride)
            if on_path:
                cache.masks[i] = idx
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, FullyConnected):
            w = params[(i, "fc_weight")]
            if on_path and strategy.selects(i, "fc_weight"):
                cache.activations[i] = x
            if on_path:
                cache.weights[(i, "fc_weight")] = w
            x = x @ w.T
            if layer.bias:
                x = x + params[(i, "fc_bias")]
        else:  # pragma: no cover - descriptor validation rejects this
            raise DescriptorError(f"unknown layer {layer!r}")
    return x, cache


def backward(
    cache: ActivationCache,
    upstream: np.ndarray,
    strategy: UpdateStrategy,
    arch: ArchDescriptor,
) -> dict[tuple[int, str], np.ndarray]:
    """Gradients of the loss w.r.t. every selected parameter.

    ``upstream`` is dL/d(predictions) with shape ``(n, 4)``.
    """
    if cache is None:
        raise ContractError("backward needs the cache of a train-mode forward")
    if cache.strategy != strategy:
        raise ContractError(
            f"cache was built for strategy {cache.strategy.name!r}, got {strategy.name!r}"
        )
    dy = np.asarray(upstream)
    if dy.shape != (cache.batch_size, arch.output_dim):
        raise ContractError(f"upstream gradient shape {dy.shape} != {(cache.batch_size, arch.output_dim)}")
    grads: dict[tuple[int, str], np.ndarray] = {}
    stop = cache.stop_layer
    dtype = next(iter(cache.weights.values())).dtype if cache.weights else dy.dtype
    dy = dy.astype(dtype)

    for i in range(len(arch.layers) - 1, stop - 1, -1):
        layer = arch.layers[i]
        need_dx = i > stop
        in_shape = cache.in_shapes[i]
        if isinstance(layer, FullyConnected):
            if strategy.selects(i, "fc_weight"):
                grads[(i, "fc_weight")] = (dy.T @ cache.activations[i]).astype(dtype)
            if layer.bias and strategy.selects(i, "fc_bias"):
                grads[(i, "fc_bias")] = _sum64(dy, 0).astype(dtype)
            if need_dx:
                dy = dy @ cache.weights[(i, "fc_weight")]
        elif isinstance(layer, Flatten):
            dy = dy.reshape((dy.shape[0], *in_shape))
        elif isinstance(layer, ReLU):
            dy = np.where(cache.masks[i], dy, 0).astype(dtype, copy=False)
        elif isinstance(layer, MaxPool):
            dy = maxpool_backward(dy, cache.masks[i], in_shape, layer.kernel, layer.stride)
        elif isinstance(layer, BatchNorm):
            mean, invstd = cache.stats[i]
            gamma = cache.weights[(i, "bn_gamma")]
            xhat = None
            if i in cache.activations:
                xhat = (cache.activations[i] - mean[None, :, None, None]) * invstd[None, :, None, None]
            sum_dy = _sum64(dy, (0, 2, 3))
            if strategy.selects(i, "bn_beta"):
                grads[(i, "bn_beta")] = sum_dy.astype(dtype)
            sum_dy_xhat = None
            if xhat is not None:
                sum_dy_xhat = _sum64(dy * xhat, (0, 2, 3))
            if strategy.selects(i, "bn_gamma"):
                grads[(i, "bn_gamma")] = sum_dy_xhat.astype(dtype)
            if need_dx:
                scale = (gamma * invstd)[None, :, None, None]
                if cache.batch_stats:
                    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
                    dy = scale * (
                        dy
                        - (sum_dy / m).astype(dtype)[None, :, None, None]
                        - xhat * (sum_dy_xhat / m).astype(dtype)[None, :, None, None]
                    )
                else:
                    dy = dy * scale
        elif isinstance(layer, Conv2D):
            if strategy.selects(i, "conv_weight"):
                grads[(i, "conv_weight")] = conv_weight_grad(
                    cache.activations[i], dy, layer.kernel, layer.stride, layer.padding
                ).astype(dtype)
            if layer.bias and strategy.selects(i, "conv_bias"):
                grads[(i, "conv_bias")] = _sum64(dy, (0, 2, 3)).astype(dtype)
            if need_dx:
                dy = conv_input_grad(
                    dy, cache.weights[(i, "conv_weight")], in_shape, layer.stride, layer.padding
                )
    return grads


def predict(params: ModelParams, arch: ArchDescriptor, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode predictions in chunks, as float64 ``(n, 4)``."""
    out = []
    for s in range(0, len(images), batch_size):
        y, _ = forward(params, arch, images[s : s + batch_size], mode="eval")
        out.append(y.astype(np.float64))
    if not out:
        return np.zeros((0, arch.output_dim))
    return np.concatenate(out)
