"""Synthetic test scenes: flat shapes, each with a smooth spectrum made of Gaussian peaks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import BandGrid, SpectralCube

SHAPE_KINDS = ("rect", "disc", "gradient")


@dataclass(frozen=True)
class Peak:
    center_nm: float
    width_nm: float
    amplitude: float

    def __post_init__(self):
        if self.width_nm <= 0 or self.amplitude < 0:
            raise ValueError("peak width must be > 0 and amplitude >= 0")


@dataclass(frozen=True)
class Shape:
    """``geometry`` is (x0, y0, x1, y1) for rect/gradient, (cx, cy, r) for disc, in pixels."""

    kind: str
    geometry: tuple[float, ...]
    peaks: tuple[Peak, ...]

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"shape kind must be one of {SHAPE_KINDS}")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    bands: BandGrid = field(default_factory=lambda: BandGrid.uniform(8))
    n_random_shapes: int = 0
    shapes: tuple[Shape, ...] = ()
    background: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.bands.wavelengths_nm[0], self.bands.wavelengths_nm[-1]
        for s in self.shapes:
            for p in s.peaks:
                if not lo <= p.center_nm <= hi:
                    raise ValueError(f"peak at {p.center_nm} nm outside band range [{lo}, {hi}]")


def spectrum(peaks, wavelengths: np.ndarray) -> np.ndarray:
    s = np.zeros_like(wavelengths, dtype=float)
    for p in peaks:
        s += p.amplitude * np.exp(-0.5 * ((wavelengths - p.center_nm) / p.width_nm) ** 2)
    return s


def _random_shape(rng: np.random.Generator, H: int, W: int, bands: BandGrid) -> Shape:
    lo, hi = bands.wavelengths_nm[0], bands.wavelengths_nm[-1]
    kind = SHAPE_KINDS[int(rng.integers(0, 3))] if rng.random() < 0.3 else ("rect", "disc")[int(rng.integers(0, 2))]
    n_peaks = int(rng.integers(1, 3))
    peaks = tuple(Peak(float(rng.uniform(lo, hi)), float(rng.uniform(40, 150)), float(rng.uniform(0.3, 1.0)))
                  for _ in range(n_peaks))
    if kind == "disc":
        r = float(rng.uniform(0.08, 0.22) * min(H, W))
        geom = (float(rng.uniform(r, W - r)), float(rng.uniform(r, H - r)), r)
    else:
        w, h = rng.uniform(0.15, 0.45) * W, rng.uniform(0.15, 0.45) * H
        x0, y0 = rng.uniform(0, W - w), rng.uniform(0, H - h)
        geom = (float(x0), float(y0), float(x0 + w), float(y0 + h))
    return Shape(kind, geom, peaks)


def _mask(shape: Shape, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    if shape.kind == "disc":
        cx, cy, r = shape.geometry
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    x0, y0, x1, y1 = shape.geometry
    return (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)


def synth(spec: SceneSpec) -> SpectralCube:
    """Paint shapes back to front; values are clipped to [0, 1]."""
    H, W = spec.height, spec.width
    wl = spec.bands.array
    rng = np.random.default_rng(spec.seed)
    shapes = list(spec.shapes) + [_random_shape(rng, H, W, spec.bands) for _ in range(spec.n_random_shapes)]
    data = np.full((len(wl), H, W), float(spec.background))
    for shape in shapes:
        m = _mask(shape, H, W)
        s = spectrum(shape.peaks, wl)
        if shape.kind == "gradient":
            x0, _, x1, _ = shape.geometry
            ramp = np.clip((np.arange(W) + 0.5 - x0) / max(x1 - x0, 1e-9), 0, 1)
            data[:, m] = (s[:, None, None] * (0.25 + 0.75 * ramp)[None, None, :] * np.ones((1, H, 1)))[:, m]
        else:
            data[:, m] = s[:, None]
    return SpectralCube(spec.bands, np.clip(data, 0.0, 1.0))
