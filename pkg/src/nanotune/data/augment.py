"""Photometric augmentation, horizontal flips and pair time reversal.

Images are float arrays in [0, 1] with shape ``(h, w)``. Photometric ops never
touch the label; a horizontal flip negates the label's ``y`` and ``yaw``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
from scipy.ndimage import uniform_filter

from ..losses import ConsistencyPair
from ..pose import Pose4, flip, invert


@dataclass(frozen=True)
class AugmentConfig:
    # application probabilities
    p_exposure: float = 0.5
    p_contrast: float = 0.5
    p_noise: float = 0.5
    p_blur: float = 0.2
    p_vignette: float = 0.3
    p_flip: float = 0.5
    # magnitudes
    exposure: tuple[float, float] = (0.7, 1.3)
    contrast: tuple[float, float] = (0.7, 1.3)
    noise_max: float = 8 / 255
    blur_max: int = 5
    vignette_max: float = 0.3

    @classmethod
    def disabled(cls) -> AugmentConfig:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def photometric_only(self) -> AugmentConfig:
        return replace(self, p_flip=0.0)


def flip_image(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


def vignette_mask(h: int, w: int, strength: float) -> np.ndarray:
    yy = (np.arange(h) - (h - 1) / 2) / ((h - 1) / 2 if h > 1 else 1)
    xx = (np.arange(w) - (w - 1) / 2) / ((w - 1) / 2 if w > 1 else 1)
    r2 = (yy[:, None] ** 2 + xx[None, :] ** 2) / 2.0
    return 1.0 - strength * r2


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def photometric(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    # one draw per op keeps the random stream aligned whatever gets applied
    u = rng.random(5)
    if u[0] < cfg.p_exposure:
        img = img * rng.uniform(*cfg.exposure)
    if u[1] < cfg.p_contrast:
        m = img.mean()
        img = (img - m) * rng.uniform(*cfg.contrast) + m
    if u[2] < cfg.p_noise:
        img = img + rng.normal(0.0, rng.uniform(0.0, cfg.noise_max), size=img.shape)
    if u[3] < cfg.p_blur and cfg.blur_max >= 3:
        k = int(rng.choice(np.arange(3, cfg.blur_max + 1, 2)))
        img = uniform_filter(img, size=k, mode="nearest")
    if u[4] < cfg.p_vignette:
        img = img * vignette_mask(*img.shape[-2:], rng.uniform(0.0, cfg.vignette_max))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment(
    image: np.ndarray,
    label: Pose4,
    seed: Union[int, np.random.Generator, None] = None,
    cfg: Optional[AugmentConfig] = None,
) -> tuple[np.ndarray, Pose4]:
    """Apply configured photometric ops and a random horizontal flip."""
    cfg = cfg or AugmentConfig()
    rng = _rng(seed)
    do_flip = rng.random() < cfg.p_flip
    img = photometric(image, rng, cfg)
    if do_flip:
        return flip_image(img), flip(label)
    return img, label


def flip_pair(pair: ConsistencyPair) -> ConsistencyPair:
    """Mirror both poses of a pair to match horizontally flipped images."""
    return replace(pair, odom=flip(pair.odom), subj_rel=flip(pair.subj_rel))


def time_reverse(pair: ConsistencyPair) -> ConsistencyPair:
    """Swap the pair's instants; odometry and subject motion are inverted."""
    return ConsistencyPair(pair.j, pair.i, invert(pair.odom), invert(pair.subj_rel), pair.in_sc_set)


def maybe_time_reverse(pair: ConsistencyPair, rng: np.random.Generator, p: float = 0.5) -> ConsistencyPair:
    return time_reverse(pair) if rng.random() < p else pair
