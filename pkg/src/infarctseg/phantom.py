"""Synthetic short-axis cardiac phantoms with pixel-exact ground truth.

Each phantom is a blood pool disc inside a myocardial ring on a textured
background. An optional scar occupies an angular sector of the ring growing
outward from the endocardium, with a chosen transmural fraction. Intensities
imitate late-enhancement contrast: healthy muscle dark, blood bright, scar
brightest. Slices of one "patient" share a base geometry and vary slightly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Sample
from .errors import DomainError

BACKGROUND, BLOOD, MUSCLE, SCAR = 0, 1, 2, 3


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    # radii and thickness as fractions of the image size
    blood_radius: tuple[float, float] = (0.10, 0.14)
    myo_thickness: tuple[float, float] = (0.07, 0.10)
    ellipticity: tuple[float, float] = (0.9, 1.1)
    center_jitter: float = 0.06
    scar_prob: float = 0.9
    scar_arc: tuple[float, float] = (60.0, 140.0)        # degrees
    scar_transmurality: tuple[float, float] = (0.5, 1.0)
    intensity: tuple[float, float, float, float] = (0.45, 0.7, 0.1, 0.95)
    noise: float = 0.04
    background_texture: float = 0.05
    slices_per_patient: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise DomainError(f"phantom size must be >= 8, got {self.size}")
        outer = (self.blood_radius[1] + self.myo_thickness[1]) * max(self.ellipticity) + self.center_jitter
        if outer >= 0.5:
            raise DomainError(
                f"heart outer radius budget {outer:.3f} of the image exceeds the half-width"
            )
        for lo, hi in (self.blood_radius, self.myo_thickness, self.scar_arc,
                       self.scar_transmurality, self.ellipticity):
            if lo > hi or lo < 0:
                raise DomainError(f"invalid range ({lo}, {hi})")
        if not 0.0 <= self.scar_prob <= 1.0:
            raise DomainError(f"scar_prob must lie in [0, 1], got {self.scar_prob}")
        if self.slices_per_patient < 1:
            raise DomainError("slices_per_patient must be >= 1")


@dataclass(frozen=True)
class Geometry:
    cy: float
    cx: float
    blood_radius: float     # pixels
    thickness: float        # pixels
    ellipticity: float      # x-axis stretch
    scar_start: float       # radians
    scar_arc: float         # radians, 0 = no scar
    transmurality: float

    def areas(self) -> dict[int, float]:
        """Analytic class areas in pixels (ellipse areas scale by ``ellipticity``)."""
        rb, t, e = self.blood_radius, self.thickness, self.ellipticity
        blood = math.pi * rb * rb * e
        ring = math.pi * ((rb + t) ** 2 - rb * rb) * e
        scar = (self.scar_arc / (2 * math.pi)) * math.pi * ((rb + self.transmurality * t) ** 2 - rb * rb) * e
        return {BLOOD: blood, MUSCLE: ring - scar, SCAR: scar}


def render_labels(geo: Geometry, size: int) -> np.ndarray:
    """Class of each pixel, decided at the pixel center."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = y - geo.cy
    dx = (x - geo.cx) / geo.ellipticity
    r = np.hypot(dy, dx)
    labels = np.zeros((size, size), dtype=np.uint8)
    rb, t = geo.blood_radius, geo.thickness
    labels[r < rb] = BLOOD
    ring = (r >= rb) & (r < rb + t)
    labels[ring] = MUSCLE
    if geo.scar_arc > 0:
        ang = np.mod(np.arctan2(dy, dx) - geo.scar_start, 2 * math.pi)
        scar = ring & (ang < geo.scar_arc) & (r < rb + geo.transmurality * t)
        labels[scar] = SCAR
    return labels


def render_image(labels: np.ndarray, spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    means = np.asarray(spec.intensity)
    img = means[labels]
    if spec.background_texture > 0:
        field = gaussian_filter(rng.standard_normal(labels.shape), sigma=spec.size / 12, mode="wrap")
        field *= spec.background_texture / max(field.std(), 1e-12)
        img = np.where(labels == BACKGROUND, img + field, img)
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, labels.shape)
    return np.clip(img, 0.0, 1.0)


def _patient_geometry(spec: PhantomSpec, rng: np.random.Generator) -> Geometry:
    s = spec.size
    has_scar = rng.uniform() < spec.scar_prob
    return Geometry(
        cy=(s - 1) / 2 + rng.uniform(-1, 1) * spec.center_jitter * s,
        cx=(s - 1) / 2 + rng.uniform(-1, 1) * spec.center_jitter * s,
        blood_radius=rng.uniform(*spec.blood_radius) * s,
        thickness=rng.uniform(*spec.myo_thickness) * s,
        ellipticity=rng.uniform(*spec.ellipticity),
        scar_start=rng.uniform(0, 2 * math.pi),
        scar_arc=math.radians(rng.uniform(*spec.scar_arc)) if has_scar and spec.scar_arc[1] > 0 else 0.0,
        transmurality=rng.uniform(*spec.scar_transmurality),
    )


def _slice_geometry(base: Geometry, k: int, n: int, spec: PhantomSpec, rng) -> Geometry:
    # base-to-apex: the cavity shrinks slightly along the stack
    frac = k / max(n - 1, 1)
    shrink = 1.0 - 0.2 * frac
    lo_r = spec.blood_radius[0] * spec.size * 0.75
    return Geometry(
        cy=base.cy + rng.normal(0, 0.5),
        cx=base.cx + rng.normal(0, 0.5),
        blood_radius=max(lo_r, base.blood_radius * shrink),
        thickness=base.thickness * rng.uniform(0.95, 1.05),
        ellipticity=base.ellipticity,
        scar_start=base.scar_start + rng.normal(0, 0.1),
        scar_arc=base.scar_arc * rng.uniform(0.85, 1.0) if base.scar_arc > 0 else 0.0,
        transmurality=min(1.0, base.transmurality * rng.uniform(0.9, 1.1)),
    )


def generate_phantoms(spec: PhantomSpec, count: int) -> list[Sample]:
    """``count`` samples grouped into patients of ``spec.slices_per_patient`` slices.

    Deterministic under ``spec.seed``.
    """
    if count < 0:
        raise DomainError("count must be non-negative")
    rng = np.random.default_rng(spec.seed)
    samples: list[Sample] = []
    n = spec.slices_per_patient
    patient = 0
    while len(samples) < count:
        base = _patient_geometry(spec, rng)
        for k in range(min(n, count - len(samples))):
            geo = _slice_geometry(base, k, n, spec, rng)
            labels = render_labels(geo, spec.size)
            samples.append(Sample(render_image(labels, spec, rng), labels, f"P{patient:03d}"))
        patient += 1
    return samples
