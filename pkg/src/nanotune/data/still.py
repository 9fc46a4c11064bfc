from __future__ import annotations

from typing import Sequence

import numpy as np

from .records import FlightRecord


def still_mask(timestamps, positions, v_max: float = 0.1, t_min: float = 1.0) -> np.ndarray:
    """Boolean mask of samples at which the subject has been still for ``t_min``.

    Speed is the finite-difference translation speed between consecutive
    samples. Sample ``k`` is still when every step in the preceding ``t_min``
    seconds moved at ``<= v_max``; the first ``t_min`` of any still stretch is a
    warm-up and is not flagged.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    pos = np.asarray(positions, dtype=np.float64).reshape(len(ts), -1)
    n = len(ts)
    out = np.zeros(n, dtype=bool)
    if n < 2:
        return out
    speed = np.linalg.norm(np.diff(pos, axis=0), axis=1) / np.diff(ts)
    slow = speed <= v_max + 1e-12
    run_start = 0  # earliest index reachable backwards through slow steps
    for k in range(1, n):
        if not slow[k - 1]:
            run_start = k
        out[k] = ts[k] - ts[run_start] >= t_min - 1e-9
    return out


def detect_still(seq: Sequence[FlightRecord], v_max: float = 0.1, t_min: float = 1.0) -> np.ndarray:
    """Positions in ``seq`` where the subject stands still (see :func:`still_mask`)."""
    if not seq:
        return np.zeros(0, dtype=int)
    ts = [r.timestamp for r in seq]
    pos = [(r.subject.x, r.subject.y, r.subject.z) for r in seq]
    return np.flatnonzero(still_mask(ts, pos, v_max, t_min))
