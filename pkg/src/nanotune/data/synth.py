"""Synthetic pose-estimation scenes with a controllable domain shift.

The subject is drawn as a filled ellipse seen through a pinhole camera looking
along the drone's +x axis (y to the left, z up): the horizontal image position
follows ``-f * y / x``, the vertical one ``-f * z / x`` and the apparent size
scales with ``1 / x``. Heading is made observable by a notch cut into the top
edge and a marker disc, both shifted sideways by ``sin(yaw)``, with the marker
brightness following ``cos(yaw)``.

Two kinds of data come out of here: i.i.d. frames for pretraining, and 4 Hz
flight sequences in which the subject alternates between standing still and
walking while the drone keeps it in view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from ..pose import Pose4, compose, invert
from .augment import vignette_mask
from .records import FlightRecord


class DomainSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SubjectSpec:
    subject_id: str
    intensity: float = 0.8
    width_m: float = 0.45
    height_m: float = 0.6
    marker_contrast: float = 0.25


@dataclass(frozen=True)
class DomainSpec:
    name: str = "A"
    height: int = 96
    width: int = 160
    focal_px: float = 90.0
    cx: Optional[float] = None  # None: image centre
    cy: Optional[float] = None
    background: float = 0.35
    texture: float = 0.08
    texture_seed: int = 0
    noise: float = 2 / 255
    vignette: float = 0.0
    subjects: tuple[SubjectSpec, ...] = field(default_factory=lambda: (SubjectSpec("a0"),))
    max_range: float = 4.5

    def __post_init__(self) -> None:
        if self.height < 8 or self.width < 8:
            raise DomainSpecError("image must be at least 8x8")
        if self.focal_px <= 0:
            raise DomainSpecError("focal length must be positive")
        if not (0.0 <= self.background <= 1.0) or self.texture < 0 or self.noise < 0:
            raise DomainSpecError("background in [0, 1], texture and noise >= 0")
        if not (0.0 <= self.vignette < 1.0):
            raise DomainSpecError("vignette strength must be in [0, 1)")
        if not self.subjects:
            raise DomainSpecError("domain needs at least one subject")
        for s in self.subjects:
            if not (0.0 <= s.intensity <= 1.0) or s.width_m <= 0 or s.height_m <= 0:
                raise DomainSpecError(f"bad subject {s}")
            if self.focal_px * s.width_m / self.max_range < 1.0:
                raise DomainSpecError(f"subject {s.subject_id} is under 1 px wide at {self.max_range} m")

    @property
    def principal_point(self) -> tuple[float, float]:
        cx = (self.width - 1) / 2 if self.cx is None else self.cx
        cy = (self.height - 1) / 2 if self.cy is None else self.cy
        return cx, cy

    def scaled(self, height: int, width: int) -> DomainSpec:
        """Same scene at a different resolution (focal length scales along)."""
        k = width / self.width
        return replace(
            self,
            height=height,
            width=width,
            focal_px=self.focal_px * k,
            cx=None if self.cx is None else self.cx * k,
            cy=None if self.cy is None else self.cy * k,
        )

    def subject(self, subject_id: str) -> SubjectSpec:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)


def default_domains(height: int = 96, width: int = 160) -> tuple[DomainSpec, DomainSpec]:
    """Pretraining domain A and shifted domain B with three subjects."""
    a = DomainSpec(
        name="A",
        background=0.30,
        texture=0.06,
        texture_seed=11,
        noise=2 / 255,
        vignette=0.0,
        subjects=(
            SubjectSpec("a0", intensity=0.80, width_m=0.45, height_m=0.60),
            SubjectSpec("a1", intensity=0.70, width_m=0.42, height_m=0.62),
            SubjectSpec("a2", intensity=0.90, width_m=0.48, height_m=0.58),
        ),
    )
    b = DomainSpec(
        name="B",
        background=0.55,
        texture=0.14,
        texture_seed=23,
        noise=6 / 255,
        vignette=0.25,
        subjects=(
            SubjectSpec("b0", intensity=0.95, width_m=0.56, height_m=0.70, marker_contrast=0.35),
            SubjectSpec("b1", intensity=0.20, width_m=0.60, height_m=0.74, marker_contrast=0.30),
            SubjectSpec("b2", intensity=0.85, width_m=0.52, height_m=0.66, marker_contrast=0.40),
        ),
    )
    if (height, width) != (a.height, a.width):
        a, b = a.scaled(height, width), b.scaled(height, width)
    return a, b


# -- rendering ----------------------------------------------------------------


def background_panorama(domain: DomainSpec) -> np.ndarray:
    """A horizontally periodic texture four image-widths wide."""
    rng = np.random.default_rng(domain.texture_seed)
    h, w = domain.height, 4 * domain.width
    noise = gaussian_filter(rng.standard_normal((h, w)), sigma=max(1.0, domain.width / 40), mode="wrap")
    noise /= noise.std() + 1e-12
    ramp = np.linspace(0.5, -0.5, h)[:, None] * 0.5
    return domain.background + domain.texture * (noise + ramp)


def background_view(panorama: np.ndarray, width: int, offset: float) -> np.ndarray:
    cols = (np.arange(width) + int(round(offset))) % panorama.shape[1]
    return panorama[:, cols]


def _soft(d: np.ndarray) -> np.ndarray:
    # ~1 px antialiasing ramp on a signed distance in pixels
    return np.clip(0.5 - d, 0.0, 1.0)


def render_subject(
    rel: Pose4, subject: SubjectSpec, domain: DomainSpec, background: np.ndarray
) -> np.ndarray:
    """Noise-free float rendering of ``subject`` at ``rel`` over ``background``."""
    if rel.x <= 0.1:
        raise ValueError("subject behind or too close to the camera")
    h, w = domain.height, domain.width
    f = domain.focal_px
    cx, cy = domain.principal_point
    u0 = cx - f * rel.y / rel.x
    v0 = cy - f * rel.z / rel.x
    a = f * subject.width_m / 2 / rel.x
    b = f * subject.height_m / 2 / rel.x
    uu = np.arange(w, dtype=np.float64)[None, :] - u0
    vv = np.arange(h, dtype=np.float64)[:, None] - v0
    r = np.sqrt((uu / a) ** 2 + (vv / b) ** 2)
    body = _soft((r - 1.0) * min(a, b))

    s, c = math.sin(rel.yaw), math.cos(rel.yaw)
    nu = uu - 0.55 * a * s
    notch = _soft(np.maximum(np.abs(nu) - 0.3 * a, vv + 0.5 * b))
    body = body * (1.0 - notch)

    mr = max(0.6, 0.28 * min(a, b))
    md = np.sqrt((uu - 0.5 * a * s) ** 2 + (vv + 0.15 * b) ** 2)
    marker = _soft(md - mr) * body
    marker_level = np.clip(subject.intensity + subject.marker_contrast * c * (1 if subject.intensity < 0.5 else -1), 0, 1)

    img = background * (1.0 - body) + subject.intensity * body
    return img * (1.0 - marker) + marker_level * marker


def finish_image(img: np.ndarray, domain: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """Sensor effects and 8-bit quantisation."""
    if domain.vignette:
        img = img * vignette_mask(domain.height, domain.width, domain.vignette)
    if domain.noise:
        img = img + rng.normal(0.0, domain.noise, size=img.shape)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


# -- pose processes -----------------------------------------------------------


def sample_relative(rng: np.random.Generator, max_range: float = 4.5) -> Pose4:
    """Relative pose drawn from the pretraining distribution (x in [0.9, max_range])."""
    x = rng.uniform(0.9, max_range)
    y = rng.uniform(-0.7, 0.7) * x
    z = float(np.clip(rng.normal(0.0, 0.2), -0.5, 0.5))
    return Pose4(x, y, z, rng.uniform(-math.pi, math.pi))


def _ou(rng, n, mean, sd, tau, dt, start=None):
    rho = math.exp(-dt / tau)
    out = np.empty(n)
    out[0] = mean + sd * rng.standard_normal() if start is None else start
    noise = rng.standard_normal(n) * sd * math.sqrt(1 - rho**2)
    for k in range(1, n):
        out[k] = mean + rho * (out[k - 1] - mean) + noise[k]
    return out


def relative_track(rng: np.random.Generator, n: int, dt: float, max_range: float = 4.5) -> np.ndarray:
    """Smooth relative-pose process ``(n, 4)`` that keeps the subject in view."""
    x = _ou(rng, n, 2.2, 0.6, 5.0, dt)
    x = np.clip(np.abs(x - 1.0) + 1.0, 1.0, max_range)  # reflect at 1 m
    y = _ou(rng, n, 0.0, 0.35, 4.0, dt) * x / 2.2
    y = np.clip(y, -0.7 * x, 0.7 * x)
    z = np.clip(_ou(rng, n, 0.0, 0.18, 4.0, dt), -0.5, 0.5)
    yaw = np.cumsum(np.concatenate([[rng.uniform(-math.pi, math.pi)], rng.normal(0.0, 0.12, n - 1)]))
    return np.column_stack([x, y, z, yaw])


def subject_track(
    rng: np.random.Generator,
    n: int,
    dt: float,
    still_s: tuple[float, float] = (6.0, 20.0),
    move_s: tuple[float, float] = (3.0, 8.0),
    speed: tuple[float, float] = (0.3, 0.8),
) -> np.ndarray:
    """World-frame subject trajectory alternating still and walking phases."""
    pos = np.zeros((n, 3))
    yaw = np.zeros(n)
    heading = rng.uniform(-math.pi, math.pi)
    k = 0
    moving = bool(rng.random() < 0.5)
    cur = np.zeros(3)
    cur_yaw = heading
    while k < n:
        length = int(round(rng.uniform(*(move_s if moving else still_s)) / dt))
        v = rng.uniform(*speed)
        for _ in range(max(1, length)):
            if k >= n:
                break
            if moving:
                heading += rng.normal(0.0, 0.15)
                cur = cur + v * dt * np.array([math.cos(heading), math.sin(heading), 0.0])
                cur_yaw = heading
            pos[k] = cur
            yaw[k] = cur_yaw
            k += 1
        moving = not moving
    return np.column_stack([pos, yaw])


# -- generators ---------------------------------------------------------------


def render_record(
    rel: Pose4,
    drone: Pose4,
    timestamp: float,
    subject: SubjectSpec,
    domain: DomainSpec,
    panorama: np.ndarray,
    rng: np.random.Generator,
) -> FlightRecord:
    offset = drone.yaw / (2 * math.pi) * panorama.shape[1]
    bg = background_view(panorama, domain.width, offset)
    img = finish_image(render_subject(rel, subject, domain, bg), domain, rng)
    return FlightRecord(timestamp, img, drone, compose(drone, rel), subject.subject_id)


def generate_iid(domain: DomainSpec, n: int, seed: int, rate: float = 4.0) -> list[FlightRecord]:
    """Independent frames with random subjects, drone poses and relative poses."""
    rng = np.random.default_rng(seed)
    pano = background_panorama(domain)
    out = []
    for k in range(n):
        subject = domain.subjects[int(rng.integers(len(domain.subjects)))]
        drone = Pose4(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.5, 1.5), rng.uniform(-math.pi, math.pi))
        while True:
            rel = sample_relative(rng, domain.max_range)
            try:
                out.append(render_record(rel, drone, k / rate, subject, domain, pano, rng))
                break
            except ValueError:  # behind the camera: redraw
                continue
    return out


def generate_sequence(
    domain: DomainSpec, subject_id: str, n: int, seed: int, rate: float = 4.0
) -> list[FlightRecord]:
    """A ``rate``-Hz flight in which the drone follows one subject."""
    rng = np.random.default_rng(seed)
    subject = domain.subject(subject_id)
    pano = background_panorama(domain)
    dt = 1.0 / rate
    rel = relative_track(rng, n, dt, domain.max_range)
    subj = subject_track(rng, n, dt)
    out = []
    for k in range(n):
        r = Pose4(*rel[k])
        s = Pose4(subj[k, 0], subj[k, 1], 1.0 + subj[k, 2], subj[k, 3])
        drone = compose(s, invert(r))
        out.append(render_record(r, drone, k * dt, subject, domain, pano, rng))
    return out


def synth_generate(
    domain_a: DomainSpec, domain_b: DomainSpec, n: int, seed: int, n_a: Optional[int] = None
) -> tuple[list[FlightRecord], dict[str, list[FlightRecord]]]:
    """Pretraining frames from ``domain_a`` and one ``n``-sample sequence per ``domain_b`` subject."""
    ss = np.random.SeedSequence(seed)
    seeds = ss.spawn(1 + len(domain_b.subjects))
    a = generate_iid(domain_a, n if n_a is None else n_a, int(seeds[0].generate_state(1)[0]))
    b = {
        s.subject_id: generate_sequence(domain_b, s.subject_id, n, int(seeds[k + 1].generate_state(1)[0]))
        for k, s in enumerate(domain_b.subjects)
    }
    return a, b
