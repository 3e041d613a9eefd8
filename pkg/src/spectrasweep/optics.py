"""Fresnel-lens physics: phase step, chromatic focal law, focus schedule, defocus PSF.

Units: distances in mm, wavelengths in nm, pixel pitch in um.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import BandGrid

UM_PER_MM = 1000.0


@dataclass(frozen=True)
class LensConfig:
    n0: float = 1.5
    h_nm: float = 685.0
    lambda0_nm: float = 685.0
    f0_mm: float = 100.0
    aperture_mm: float = 10.0
    m: int = 1

    def __post_init__(self):
        if not self.n0 > 1:
            raise ValueError("refractive index n0 must exceed 1")
        if not self.h_nm >= 0:
            raise ValueError("element height must be non-negative")
        if not (self.lambda0_nm > 0 and self.f0_mm > 0 and self.aperture_mm > 0):
            raise ValueError("lambda0, f0 and aperture must be positive")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError("diffraction order m must be an integer >= 1")


@dataclass(frozen=True)
class AcquisitionGeometry:
    u_mm: float = 1300.0
    z0_mm: float = 70.0
    z1_mm: float = 160.0
    pixel_pitch_um: float = 2.5
    sensor_px: tuple[int, int] = (256, 256)

    def __post_init__(self):
        if not (self.u_mm > self.z1_mm > self.z0_mm > 0):
            raise ValueError("need u > z1 > z0 > 0")
        if not self.pixel_pitch_um > 0:
            raise ValueError("pixel pitch must be positive")


@dataclass(frozen=True)
class FocusSchedule:
    z0_mm: float
    lambda0_nm: float
    positions_mm: tuple[float, ...]

    def __post_init__(self):
        pos = tuple(float(p) for p in self.positions_mm)
        if not (self.z0_mm > 0 and self.lambda0_nm > 0):
            raise ValueError("z0 and lambda0 must be positive")
        if any(p <= 0 for p in pos):
            raise ValueError("positions must be positive")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValueError("positions must be strictly increasing")
        object.__setattr__(self, "positions_mm", pos)

    def __len__(self):
        return len(self.positions_mm)


def _check_positive(name, value):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")


def phase_shift(lens: LensConfig, lambda_nm: float) -> float:
    """Phase delay in radians of an element of height h at wavelength lambda."""
    _check_positive("wavelength", lambda_nm)
    return 2.0 * math.pi * lens.n0 * lens.h_nm / lambda_nm


def focal_ratio(m: int, lambda_nm: float, m_prime: int, lambda_prime_nm: float) -> float:
    """f'/f for two (order, wavelength) pairs of the same diffractive lens."""
    _check_positive("wavelength", lambda_nm)
    _check_positive("wavelength", lambda_prime_nm)
    return (m * lambda_nm) / (m_prime * lambda_prime_nm)


def focal_length(lens: LensConfig, lambda_nm: float) -> float:
    # first-order focal law only, whatever lens.m says
    return lens.f0_mm * focal_ratio(1, lens.lambda0_nm, 1, lambda_nm)


def image_distance(lens: LensConfig, u_mm: float, lambda_nm: float) -> float:
    """Sensor distance satisfying the thin-lens imaging condition at ``lambda_nm``."""
    inv = 1.0 / focal_length(lens, lambda_nm) - 1.0 / u_mm
    if inv <= 0:
        raise ValueError(f"object at {u_mm} mm is inside the focal length for {lambda_nm} nm")
    return 1.0 / inv


def focused_wavelength(schedule: FocusSchedule, z_mm: float) -> float:
    _check_positive("lens position", z_mm)
    return schedule.z0_mm * schedule.lambda0_nm / z_mm


def position_for_wavelength(schedule: FocusSchedule, lambda_nm: float) -> float:
    _check_positive("wavelength", lambda_nm)
    return schedule.z0_mm * schedule.lambda0_nm / lambda_nm


def reference_schedule(lens: LensConfig, geometry: AcquisitionGeometry) -> FocusSchedule:
    """Schedule anchored where the design wavelength images sharply; no sweep positions yet."""
    z0 = image_distance(lens, geometry.u_mm, lens.lambda0_nm)
    return FocusSchedule(z0, lens.lambda0_nm, ())


def schedule_for_bands(lens: LensConfig, geometry: AcquisitionGeometry, bands: BandGrid) -> FocusSchedule:
    ref = reference_schedule(lens, geometry)
    # long wavelengths focus closest to the lens; sort so positions increase
    wl = sorted(bands.wavelengths_nm, reverse=True)
    positions = [position_for_wavelength(ref, w) for w in wl]
    bad = [(w, z) for w, z in zip(wl, positions) if not geometry.z0_mm <= z <= geometry.z1_mm]
    if bad:
        listing = ", ".join(f"{w:.3f} nm -> {z:.3f} mm" for w, z in bad)
        raise ValueError(
            f"bands map outside sweep interval [{geometry.z0_mm}, {geometry.z1_mm}] mm: {listing}")
    return FocusSchedule(ref.z0_mm, ref.lambda0_nm, tuple(positions))


def defocus_radius_px(lens: LensConfig, geometry: AcquisitionGeometry, lambda_nm: float, z_mm: float) -> float:
    """Geometric blur-disc radius in pixels for wavelength ``lambda_nm`` with the sensor at ``z_mm``."""
    _check_positive("lens position", z_mm)
    mismatch = 1.0 / focal_length(lens, lambda_nm) - 1.0 / geometry.u_mm - 1.0 / z_mm
    radius_mm = 0.5 * lens.aperture_mm * z_mm * abs(mismatch)
    return radius_mm * UM_PER_MM / geometry.pixel_pitch_um


def _disc_overlap_1d_integral(a: float, b: float, r: float) -> float:
    """Integral of sqrt(r^2 - x^2) over [a, b] clipped to [-r, r]."""
    a, b = max(a, -r), min(b, r)
    if b <= a:
        return 0.0

    def F(x):
        x = min(max(x, -r), r)
        return 0.5 * (x * math.sqrt(max(r * r - x * x, 0.0)) + r * r * math.asin(x / r))

    return F(b) - F(a)


def _pixel_disc_area(x0: float, x1: float, y0: float, y1: float, r: float) -> float:
    """Exact area of the intersection of rectangle [x0,x1]x[y0,y1] with the disc of radius r at 0."""
    # area = integral over x of |[y0,y1] ∩ [-s(x), s(x)]|, s(x)=sqrt(r^2-x^2)
    # split x-range at points where s(x) crosses |y0| or |y1| so the integrand is smooth per piece
    xs = {max(x0, -r), min(x1, r)}
    for y in (y0, y1):
        if abs(y) < r:
            c = math.sqrt(r * r - y * y)
            xs.update(x for x in (-c, c) if x0 < x < x1)
    xs = sorted(xs)
    total = 0.0
    for a, b in zip(xs, xs[1:]):
        if b <= a:
            continue
        m = 0.5 * (a + b)
        s = math.sqrt(max(r * r - m * m, 0.0))
        lo_clip = y0 > -s  # lower bound set by the rectangle rather than the disc
        hi_clip = y1 < s
        if max(y0, -s) >= min(y1, s):
            continue
        upper = (y1 * (b - a)) if hi_clip else _disc_overlap_1d_integral(a, b, r)
        lower = (y0 * (b - a)) if lo_clip else -_disc_overlap_1d_integral(a, b, r)
        total += upper - lower
    return total


def psf_kernel(r_px: float, kind: str = "disc") -> np.ndarray:
    """Normalized defocus kernel of size (2*ceil(r)+1)^2.

    ``kind="disc"`` rasterizes a uniform disc by exact pixel/disc area overlap;
    ``kind="gaussian"`` uses sigma = r/2 on the same support.
    """
    if r_px < 0 or not np.isfinite(r_px):
        raise ValueError(f"blur radius must be finite and non-negative, got {r_px}")
    if r_px < 0.5:
        return np.ones((1, 1))
    R = int(math.ceil(r_px))
    size = 2 * R + 1
    k = np.zeros((size, size))
    if kind == "disc":
        for i in range(size):
            for j in range(size):
                y, x = i - R, j - R
                k[i, j] = _pixel_disc_area(x - 0.5, x + 0.5, y - 0.5, y + 0.5, r_px)
    elif kind == "gaussian":
        ax = np.arange(-R, R + 1)
        g = np.exp(-0.5 * (ax / (r_px / 2.0)) ** 2)
        k = np.outer(g, g)
    else:
        raise ValueError(f"unknown PSF kind {kind!r}")
    return k / k.sum()
