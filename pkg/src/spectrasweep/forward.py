"""Render the grayscale focal-sweep stack a Fresnel-lens camera records from a spectral cube."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import ndimage, signal

from .core import GrayscaleImage, GrayscaleStack, SpectralCube
from .optics import (AcquisitionGeometry, FocusSchedule, LensConfig, defocus_radius_px,
                     psf_kernel, reference_schedule, position_for_wavelength)

NOISE_KINDS = ("none", "gaussian", "poisson-gaussian")


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "none"
    sigma: float = 0.0
    photon_scale: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not self.photon_scale > 0:
            raise ValueError("photon_scale must be > 0")


@dataclass(frozen=True)
class SensorResponse:
    weights: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.any(w > 0):
            raise ValueError("response weights must be non-negative and not all zero")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))

    @classmethod
    def flat(cls, n_bands: int) -> "SensorResponse":
        return cls((1.0 / n_bands,) * n_bands)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.weights)


# ---------------------------------------------------------------------------
# blur operator with replicate-edge borders, and its exact adjoint

_FFT_MIN_TAPS = 15


def blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    R = kernel.shape[0] // 2
    if R == 0:
        return img * kernel[0, 0]
    padded = np.pad(img, R, mode="edge")
    if kernel.shape[0] >= _FFT_MIN_TAPS:
        return signal.fftconvolve(padded, kernel[::-1, ::-1], mode="valid")
    return ndimage.correlate(padded, kernel, mode="constant")[R:-R, R:-R]


def _fold_edge_padding(p: np.ndarray, R: int) -> np.ndarray:
    """Adjoint of np.pad(..., R, mode='edge')."""
    q = p.copy()
    q[R, :] += q[:R, :].sum(axis=0)
    q[-R - 1, :] += q[-R:, :].sum(axis=0)
    q = q[R:-R, :]
    q[:, R] += q[:, :R].sum(axis=1)
    q[:, -R - 1] += q[:, -R:].sum(axis=1)
    return q[:, R:-R]


def blur_adjoint(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    R = kernel.shape[0] // 2
    if R == 0:
        return img * kernel[0, 0]
    if kernel.shape[0] >= _FFT_MIN_TAPS:
        full = signal.fftconvolve(img, kernel, mode="full")
    else:
        full = np.zeros((img.shape[0] + 2 * R, img.shape[1] + 2 * R))
        full[R:-R, R:-R] = img
        full = ndimage.convolve(full, kernel, mode="constant")
    return _fold_edge_padding(full, R)


@lru_cache(maxsize=4096)
def _kernel_cached(r_px: float, kind: str) -> np.ndarray:
    k = psf_kernel(r_px, kind)
    k.setflags(write=False)
    return k


def frame_kernels(bands: Sequence[float], lens: LensConfig, geometry: AcquisitionGeometry,
                  z_mm: float, psf: str = "disc") -> list[np.ndarray]:
    return [_kernel_cached(round(defocus_radius_px(lens, geometry, wl, z_mm), 12), psf) for wl in bands]


def _check_bands(bands: Sequence[float], lens, geometry):
    ref = reference_schedule(lens, geometry)
    for wl in bands:
        z = position_for_wavelength(ref, wl)
        if not geometry.z0_mm <= z <= geometry.z1_mm:
            raise ValueError(f"band {wl:.3f} nm focuses at {z:.3f} mm, outside "
                             f"[{geometry.z0_mm}, {geometry.z1_mm}] mm")


def render_frame(data: np.ndarray, kernels: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Noiseless, unnormalized frame: weighted sum of per-band blurred images."""
    out = np.zeros(data.shape[1:])
    for b in range(data.shape[0]):  # fixed band order keeps the sum bit-reproducible
        if weights[b] != 0:
            out += weights[b] * blur(data[b], kernels[b])
    return out


def render_frame_adjoint(residual: np.ndarray, kernels: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    return np.stack([weights[b] * blur_adjoint(residual, kernels[b]) for b in range(len(kernels))])


def magnify(img: np.ndarray, factor: float) -> np.ndarray:
    """Scale image content by ``factor`` about the image center (bilinear, edge-clamped)."""
    if factor == 1.0:
        return img.copy()
    H, W = img.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    src_y = cy + (yy - cy) / factor
    src_x = cx + (xx - cx) / factor
    return ndimage.map_coordinates(img, [src_y, src_x], order=1, mode="nearest")


def apply_noise(image: GrayscaleImage | np.ndarray, noise: NoiseModel, stream: int = 0) -> GrayscaleImage:
    data = image.data if isinstance(image, GrayscaleImage) else np.asarray(image, dtype=float)
    if noise.kind == "none":
        return image if isinstance(image, GrayscaleImage) else GrayscaleImage(np.clip(data, 0, 1))
    rng = np.random.default_rng([noise.seed, stream])
    out = data
    if noise.kind == "poisson-gaussian":
        out = rng.poisson(np.clip(out, 0, None) * noise.photon_scale) / noise.photon_scale
    if noise.sigma > 0:
        out = out + rng.normal(0.0, noise.sigma, size=out.shape)
    return GrayscaleImage(np.clip(out, 0.0, 1.0))


def simulate_frame(cube: SpectralCube, lens: LensConfig, geometry: AcquisitionGeometry, z_mm: float,
                   response: SensorResponse | None = None, noise: NoiseModel | None = None, *,
                   z_ref_mm: float | None = None, gain: float | None = None, psf: str = "disc",
                   stream: int = 0) -> GrayscaleImage:
    """One sensor frame at lens position ``z_mm``.

    With ``z_ref_mm`` set, the frame keeps the magnification difference relative to
    that position. ``gain`` divides the noiseless frame before noise and clamping;
    by default the frame's own noiseless maximum is used, as for a one-frame stack.
    """
    if not geometry.z0_mm <= z_mm <= geometry.z1_mm:
        raise ValueError(f"lens position {z_mm} mm outside [{geometry.z0_mm}, {geometry.z1_mm}]")
    bands = cube.bands.wavelengths_nm
    _check_bands(bands, lens, geometry)
    response = response or SensorResponse.flat(len(bands))
    if len(response.weights) != len(bands):
        raise ValueError("sensor response length differs from band count")
    raw = render_frame(cube.data, frame_kernels(bands, lens, geometry, z_mm, psf), response.array)
    if z_ref_mm is not None:
        raw = magnify(raw, z_mm / z_ref_mm)
    if gain is None:
        gain = float(raw.max()) if raw.max() > 0 else 1.0
    return apply_noise(np.clip(raw / gain, 0.0, 1.0), noise or NoiseModel(), stream)


def simulate_stack(cube: SpectralCube, lens: LensConfig, geometry: AcquisitionGeometry,
                   schedule: FocusSchedule, response: SensorResponse | None = None,
                   noise: NoiseModel | None = None, *, emit_unaligned: bool = False,
                   psf: str = "disc") -> GrayscaleStack:
    bands = cube.bands.wavelengths_nm
    _check_bands(bands, lens, geometry)
    response = response or SensorResponse.flat(len(bands))
    positions = schedule.positions_mm
    for z in positions:
        if not geometry.z0_mm <= z <= geometry.z1_mm:
            raise ValueError(f"lens position {z} mm outside [{geometry.z0_mm}, {geometry.z1_mm}]")
    z_ref = positions[len(positions) // 2]
    raws = []
    for z in positions:
        raw = render_frame(cube.data, frame_kernels(bands, lens, geometry, z, psf), response.array)
        if emit_unaligned:
            raw = magnify(raw, z / z_ref)
        raws.append(raw)
    peak = max(float(r.max()) for r in raws)
    gain = peak if peak > 0 else 1.0
    noise = noise or NoiseModel()
    frames = tuple(apply_noise(np.clip(r / gain, 0.0, 1.0), noise, stream=k) for k, r in enumerate(raws))
    return GrayscaleStack(frames, positions, gain)
