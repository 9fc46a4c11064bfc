"""Analytic training-cost accounting: MACs, retained activations, runtime.

Counting conventions
--------------------
Inference forward:
    conv ``out_elems * k^2 * in_ch``, fc ``in * out``. Batch norm is folded
    into the preceding convolution at inference, ReLU and pooling are free.
Training forward:
    inference MACs plus one pseudo-MAC per batch-norm element, since batch
    norm cannot be folded while it is being trained through.
Backward, from the head down to the earliest trained layer:
    * conv weight gradient ``out_elems * k^2 * in_ch``;
    * conv input gradient ``in_elems * k^2 * out_ch``, i.e. the transposed
      convolution evaluated at every input position (strided layers are not
      cheaper than their dilated equivalent);
    * fc weight gradient and fc input gradient ``in * out`` each;
    * batch norm: one pseudo-MAC per element for each of the input gradient,
      the scale gradient and the shift gradient when required;
    * bias gradients one pseudo-MAC per output element.
    The earliest trained layer never computes an input gradient.

Retained activations mirror :mod:`nanotune.nn.engine` exactly; see
:func:`activation_elements`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from typing import Iterable, Union

from .nn.arch import ArchDescriptor, BatchNorm, Conv2D, FullyConnected, MaxPool, ReLU
from .nn.strategy import UpdateStrategy, count_selected_params, strategy_from_name


def _prod(shape) -> int:
    return math.prod(shape)


def _backward_start(arch: ArchDescriptor, strategy: UpdateStrategy) -> int:
    keys = strategy.selected_keys(arch)
    return min((k[0] for k in keys), default=len(arch.layers))


def _batch_stats(arch, strategy, bn_mode: str) -> bool:
    if bn_mode == "auto":
        return strategy.bn_uses_batch_stats(arch)
    return bn_mode == "batch"


def forward_macs(arch: ArchDescriptor) -> int:
    shapes = arch.shapes()
    total = 0
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Conv2D):
            total += _prod(shapes[i + 1]) * layer.kernel**2 * shapes[i][0]
        elif isinstance(layer, FullyConnected):
            total += shapes[i][0] * layer.out_features
    return total


@dataclass(frozen=True)
class StepMacs:
    forward: int
    backward: int

    @property
    def total(self) -> int:
        return self.forward + self.backward


def train_step_macs(arch: ArchDescriptor, strategy: UpdateStrategy) -> StepMacs:
    shapes = arch.shapes()
    fwd = forward_macs(arch) + sum(
        _prod(shapes[i]) for i, l in enumerate(arch.layers) if isinstance(l, BatchNorm)
    )
    stop = _backward_start(arch, strategy)
    bwd = 0
    for i in range(len(arch.layers) - 1, stop - 1, -1):
        layer = arch.layers[i]
        need_dx = i > stop
        n_in, n_out = _prod(shapes[i]), _prod(shapes[i + 1])
        if isinstance(layer, Conv2D):
            k2 = layer.kernel**2
            if strategy.selects(i, "conv_weight"):
                bwd += n_out * k2 * shapes[i][0]
            if layer.bias and strategy.selects(i, "conv_bias"):
                bwd += n_out
            if need_dx:
                bwd += n_in * k2 * layer.out_channels
        elif isinstance(layer, FullyConnected):
            if strategy.selects(i, "fc_weight"):
                bwd += n_in * n_out
            if layer.bias and strategy.selects(i, "fc_bias"):
                bwd += n_out
            if need_dx:
                bwd += n_in * n_out
        elif isinstance(layer, BatchNorm):
            bwd += n_in * (
                int(need_dx) + int(strategy.selects(i, "bn_gamma")) + int(strategy.selects(i, "bn_beta"))
            )
    return StepMacs(fwd, bwd)


@dataclass(frozen=True)
class Retention:
    per_frame: int  # float elements scaling with batch size
    per_batch: int  # float elements shared by the batch (batch-norm statistics)
    mask_bytes_per_frame: int

    def elements(self, batch_size: int = 1) -> int:
        return self.per_frame * batch_size + self.per_batch


def retention(arch: ArchDescriptor, strategy: UpdateStrategy, bn_mode: str = "auto") -> Retention:
    shapes = arch.shapes()
    stop = _backward_start(arch, strategy)
    batch_stats = _batch_stats(arch, strategy, bn_mode)
    per_frame = per_batch = masks = 0
    for i in range(stop, len(arch.layers)):
        layer = arch.layers[i]
        n_in = _prod(shapes[i])
        if isinstance(layer, Conv2D) and strategy.selects(i, "conv_weight"):
            per_frame += n_in
        elif isinstance(layer, FullyConnected) and strategy.selects(i, "fc_weight"):
            per_frame += n_in
        elif isinstance(layer, BatchNorm):
            per_batch += 2 * layer.channels
            if strategy.selects(i, "bn_gamma") or (batch_stats and i > stop):
                per_frame += n_in
        elif isinstance(layer, ReLU):
            masks += n_in
        elif isinstance(layer, MaxPool):
            masks += _prod(shapes[i + 1])
    return Retention(per_frame, per_batch, masks)


def activation_elements(arch, strategy, batch_size: int = 1, bn_mode: str = "auto") -> int:
    return retention(arch, strategy, bn_mode).elements(batch_size)


def activation_bytes(
    arch, strategy, batch_size: int = 1, bytes_per_element: int = 4, bn_mode: str = "auto"
) -> int:
    """Bytes of retained float tensors for one training step."""
    return activation_elements(arch, strategy, batch_size, bn_mode) * bytes_per_element


def mask_bytes(arch, strategy, batch_size: int = 1, bn_mode: str = "auto") -> int:
    return retention(arch, strategy, bn_mode).mask_bytes_per_frame * batch_size


# -- runtime projection -------------------------------------------------------


@dataclass(frozen=True)
class SocProfile:
    """Runtime model of a target SoC.

    ``mac_per_cycle`` is an end-to-end effective rate (calibrated), not the
    kernel peak; ``peak_fwd``/``peak_bwd`` are kept for reference only.
    ``emulation`` multiplies time for software floating point and
    ``efficiency`` absorbs whatever a single calibration point leaves over.
    """

    name: str
    freq_hz: float
    mac_per_cycle: float
    emulation: float = 1.0
    efficiency: float = 1.0
    peak_fwd: float = 0.0
    peak_bwd: float = 0.0

    def __post_init__(self) -> None:
        for f in ("freq_hz", "mac_per_cycle", "emulation", "efficiency"):
            if not getattr(self, f) > 0:
                raise ValueError(f"SocProfile.{f} must be positive")


GAP9 = SocProfile("GAP9", 370e6, mac_per_cycle=5.3, peak_fwd=5.3, peak_bwd=4.6)
GAP8 = SocProfile("GAP8", 175e6, mac_per_cycle=5.3, emulation=10.0, peak_fwd=5.3, peak_bwd=4.6)

Macs = Union[int, float, StepMacs]


def _total(macs: Macs) -> float:
    return float(macs.total if isinstance(macs, StepMacs) else macs)


def estimate_time(macs_per_frame: Macs, set_size: int, epochs: int, soc: SocProfile) -> float:
    """Projected wall time in seconds for ``epochs`` passes over ``set_size`` frames."""
    if set_size <= 0 or epochs <= 0:
        raise ValueError("set_size and epochs must be positive")
    cycles = epochs * set_size * _total(macs_per_frame) / (soc.mac_per_cycle * soc.efficiency)
    return cycles / soc.freq_hz * soc.emulation


def calibrate_rate(soc: SocProfile, macs: Macs, set_size: int, epochs: int, seconds: float) -> SocProfile:
    """Solve ``mac_per_cycle`` so that the profile reproduces one measurement."""
    rate = epochs * set_size * _total(macs) * soc.emulation / (seconds * soc.freq_hz * soc.efficiency)
    return replace(soc, mac_per_cycle=rate)


def calibrate_efficiency(soc: SocProfile, macs: Macs, set_size: int, epochs: int, seconds: float) -> SocProfile:
    """Keep the rate, solve the residual efficiency factor instead."""
    eff = epochs * set_size * _total(macs) * soc.emulation / (seconds * soc.freq_hz * soc.mac_per_cycle)
    return replace(soc, efficiency=eff)


def calibrate_socs(
    arch: ArchDescriptor,
    measurements: dict,
    epochs: int = 5,
    socs: Iterable[SocProfile] = (GAP9, GAP8),
    strategies: dict | None = None,
) -> list[SocProfile]:
    """Calibrate each profile on one measured cell.

    ``measurements`` maps SoC name to ``{"strategy", "set_size", "time"}``.
    The first profile solves its MAC/cycle rate; later ones keep that rate and
    solve a residual efficiency, so emulation overheads stay explicit.
    """
    out: list[SocProfile] = []
    rate = None
    for soc in socs:
        m = measurements.get(soc.name)
        if m is None:
            out.append(soc if rate is None else replace(soc, mac_per_cycle=rate))
            continue
        step = train_step_macs(arch, strategy_from_name(m["strategy"]))
        seconds = parse_duration(str(m["time"]))
        if rate is None:
            soc = calibrate_rate(soc, step, int(m["set_size"]), epochs, seconds)
            rate = soc.mac_per_cycle
        else:
            soc = calibrate_efficiency(replace(soc, mac_per_cycle=rate), step, int(m["set_size"]), epochs, seconds)
        out.append(soc)
    return out


def parse_duration(text: str) -> float:
    """``"2:03"`` -> 123.0; plain numbers are seconds."""
    m = re.fullmatch(r"\s*(\d+):(\d{1,2})(?:\.(\d+))?\s*", text)
    if m:
        frac = float("0." + m.group(3)) if m.group(3) else 0.0
        return int(m.group(1)) * 60 + int(m.group(2)) + frac
    return float(text)


def format_duration(seconds: float) -> str:
    s = int(round(seconds))
    return f"{s // 60}:{s % 60:02d}"


# -- report -------------------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    strategy: str
    params: int
    params_pct: float
    activation_elements: int
    activation_bytes: int
    mask_bytes: int
    step: StepMacs
    times: dict  # (soc name, set size) -> seconds

    @property
    def activation_kib(self) -> float:
        """Retained elements / 1024 (one byte per element)."""
        return self.activation_elements / 1024.0


def cost_report(
    arch: ArchDescriptor,
    strategy: UpdateStrategy,
    socs: Iterable[SocProfile] = (),
    set_sizes: Iterable[int] = (512, 128),
    epochs: int = 5,
    name: str | None = None,
) -> CostReport:
    total = sum(_prod(s) for (i, role), s in arch.param_shapes().items() if not role.startswith("bn_running"))
    params = count_selected_params(arch, strategy)
    step = train_step_macs(arch, strategy)
    socs = list(socs)
    times = {
        (soc.name, n): estimate_time(step, n, epochs, soc) for soc in socs for n in set_sizes
    }
    return CostReport(
        strategy=name or strategy.name,
        params=params,
        params_pct=100.0 * params / total if total else 0.0,
        activation_elements=activation_elements(arch, strategy),
        activation_bytes=activation_bytes(arch, strategy),
        mask_bytes=mask_bytes(arch, strategy),
        step=step,
        times=times,
    )


def total_params(arch: ArchDescriptor) -> int:
    return sum(_prod(s) for (_, role), s in arch.param_shapes().items() if not role.startswith("bn_running"))
