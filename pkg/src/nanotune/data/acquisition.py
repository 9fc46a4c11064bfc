"""Fine-tuning set acquisition and the train/test split around it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .records import FlightRecord


class AcquisitionError(ValueError):
    pass


@dataclass(frozen=True)
class FinetuneSetSpec:
    """A contiguous ``segment_duration`` flight segment sampled at ``rate``.

    Frames are taken in order from the segment start until ``max_samples``
    is reached (``None``: the whole segment).
    """

    segment_duration: float = 128.0
    rate: float = 4.0
    max_samples: Optional[int] = None

    def __post_init__(self) -> None:
        if self.segment_duration <= 0 or self.rate <= 0:
            raise ValueError("segment_duration and rate must be positive")
        if self.max_samples is not None and self.max_samples < 1:
            raise ValueError("max_samples must be >= 1")

    @property
    def nominal_size(self) -> int:
        n = int(round(self.segment_duration * self.rate))
        return n if self.max_samples is None else min(n, self.max_samples)

    @property
    def flight_time(self) -> float:
        """Seconds of flight actually consumed by the acquisition."""
        return self.nominal_size / self.rate


@dataclass(frozen=True)
class Split:
    finetune_index: np.ndarray
    test_index: np.ndarray
    segment: tuple[int, int]  # [start, stop) in native samples


def split_indices(
    n: int,
    native_rate: float,
    spec: FinetuneSetSpec,
    seed: int,
    gap: int = 100,
    max_fraction: float = 0.75,
) -> Split:
    seg_len = int(round(spec.segment_duration * native_rate))
    seg_len = min(seg_len, int(np.floor(max_fraction * n)))
    if seg_len < 1 or n < seg_len + gap + 1:
        raise AcquisitionError(
            f"sequence of {n} samples too short for a {seg_len}-sample segment plus a {gap}-sample gap"
        )
    step_f = native_rate / spec.rate
    step = int(round(step_f))
    if step < 1 or abs(step - step_f) > 1e-9:
        raise AcquisitionError(f"rate {spec.rate} Hz does not divide the native {native_rate} Hz")
    rng = np.random.default_rng(seed)
    # only starts that leave at least one test sample on some side
    starts = np.arange(0, n - seg_len + 1)
    starts = starts[(starts - gap >= 1) | (starts + seg_len + gap <= n - 1)]
    start = int(starts[rng.integers(0, len(starts))])
    stop = start + seg_len
    ft = np.arange(start, stop, step)
    if spec.max_samples is not None:
        ft = ft[: spec.max_samples]
    test = np.concatenate([np.arange(0, max(start - gap, 0)), np.arange(min(stop + gap, n), n)])
    return Split(ft, test, (start, stop))


def native_rate(records: Sequence[FlightRecord]) -> float:
    ts = np.array([r.timestamp for r in records])
    if len(ts) < 2:
        raise AcquisitionError("sequence needs at least two records")
    return float(1.0 / np.median(np.diff(ts)))


def acquire_finetune_set(
    seq: Sequence[FlightRecord],
    spec: FinetuneSetSpec,
    seed: int,
    gap: int = 100,
    max_fraction: float = 0.75,
) -> tuple[list[FlightRecord], list[FlightRecord]]:
    """Random contiguous fine-tuning segment and the disjoint test records.

    ``gap`` samples on each side of the segment belong to neither set, and the
    segment covers at most ``max_fraction`` of the sequence.
    """
    split = split_indices(len(seq), native_rate(seq), spec, seed, gap, max_fraction)
    return [seq[i] for i in split.finetune_index], [seq[i] for i in split.test_index]
