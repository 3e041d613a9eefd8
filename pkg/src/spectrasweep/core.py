"""Containers for spectral cubes and grayscale focal-sweep stacks, plus their file format.

A file is a single UTF-8 JSON header line terminated by ``\\n`` followed by a raw
little-endian float32 payload laid out band-major, then row-major.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

CUBE_MAGIC = "MSCUBE1"
STACK_MAGIC = "GSTACK1"
DTYPE_TAG = "f32le"
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Raised when a cube/stack file cannot be parsed."""


def default_wavelengths(n: int = 50, lo: float = 470.0, hi: float = 900.0) -> np.ndarray:
    return np.linspace(lo, hi, n)


@dataclass(frozen=True)
class BandGrid:
    wavelengths_nm: tuple[float, ...] = field(default_factory=lambda: tuple(default_wavelengths()))

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=float)
        if wl.ndim != 1 or wl.size == 0:
            raise ValueError("band grid must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(wl)) or np.any(wl <= 0):
            raise ValueError("wavelengths must be finite and positive")
        if np.any(np.diff(wl) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        object.__setattr__(self, "wavelengths_nm", tuple(float(v) for v in wl))

    @classmethod
    def uniform(cls, n: int, lo: float = 470.0, hi: float = 900.0) -> "BandGrid":
        return cls(tuple(default_wavelengths(n, lo, hi)))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.wavelengths_nm)

    def __len__(self) -> int:
        return len(self.wavelengths_nm)

    def nearest(self, wavelength_nm: float) -> int:
        return int(np.argmin(np.abs(self.array - wavelength_nm)))


@dataclass(frozen=True, eq=False)
class SpectralCube:
    """L x H x W radiance tensor on a band grid."""

    bands: BandGrid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3:
            raise ValueError(f"cube data must be 3-D, got shape {data.shape}")
        if data.shape[0] != len(self.bands):
            raise ValueError(f"cube has {data.shape[0]} bands but grid has {len(self.bands)}")
        if not np.all(np.isfinite(data)):
            raise ValueError("cube contains non-finite values")
        if np.any(data < 0):
            raise ValueError("cube contains negative values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, SpectralCube):
            return NotImplemented
        return self.bands == other.bands and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class GrayscaleImage:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {data.shape}")
        if min(data.shape) < 8:
            raise ValueError(f"image must be at least 8x8, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        if data.min() < 0 or data.max() > 1:
            raise ValueError("image values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, GrayscaleImage):
            return NotImplemented
        return np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class GrayscaleStack:
    """K monochrome frames, each tagged with the lens-to-sensor distance it was taken at.

    ``gain`` is the factor the raw (unnormalized) frames were divided by; a solver
    needs it to put reconstructed radiance back on the scene's scale.
    """

    frames: tuple[GrayscaleImage, ...]
    lens_positions_mm: tuple[float, ...]
    gain: float = 1.0

    def __post_init__(self):
        frames = tuple(f if isinstance(f, GrayscaleImage) else GrayscaleImage(f) for f in self.frames)
        pos = tuple(float(p) for p in self.lens_positions_mm)
        if len(frames) == 0:
            raise ValueError("stack must contain at least one frame")
        if len(frames) != len(pos):
            raise ValueError(f"{len(frames)} frames but {len(pos)} lens positions")
        if len({f.shape for f in frames}) != 1:
            raise ValueError("all frames must share the same H x W")
        if any(p <= 0 for p in pos):
            raise ValueError("lens positions must be positive")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValueError(f"lens positions must be strictly increasing, got {list(pos)}")
        if not (np.isfinite(self.gain) and self.gain > 0):
            raise ValueError("gain must be positive")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "lens_positions_mm", pos)
        object.__setattr__(self, "gain", float(self.gain))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape

    def as_array(self) -> np.ndarray:
        return np.stack([f.data for f in self.frames])

    @classmethod
    def from_array(cls, arr: np.ndarray, positions: Sequence[float], gain: float = 1.0) -> "GrayscaleStack":
        return cls(tuple(GrayscaleImage(a) for a in np.asarray(arr)), tuple(positions), gain)

    def __eq__(self, other):
        if not isinstance(other, GrayscaleStack):
            return NotImplemented
        return (self.lens_positions_mm == other.lens_positions_mm and self.gain == other.gain
                and np.array_equal(self.as_array(), other.as_array()))


# ---------------------------------------------------------------------------
# file format


def _write_container(path, header: dict, payload: np.ndarray) -> None:
    line = json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"
    try:
        with open(path, "wb") as fh:
            fh.write(line)
            fh.write(np.ascontiguousarray(payload, dtype=_F32).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {os.fspath(path)!r}: {exc}") from exc


def _read_container(path, magic: str, axis_key: str) -> tuple[dict, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read {os.fspath(path)!r}: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{os.fspath(path)}: no header terminator found (byte offset {len(raw)})")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        offset = getattr(exc, "pos", getattr(exc, "start", 0))
        raise FormatError(f"{os.fspath(path)}: malformed header at byte offset {offset}: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{os.fspath(path)}: header is not a JSON object (byte offset 0)")
    if header.get("magic") != magic:
        raise FormatError(f"{os.fspath(path)}: expected magic {magic!r}, got {header.get('magic')!r}")
    if header.get("dtype") != DTYPE_TAG:
        raise FormatError(f"{os.fspath(path)}: unsupported dtype {header.get('dtype')!r}")
    try:
        dims = tuple(int(header[k]) for k in ("L", "H", "W"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{os.fspath(path)}: header missing/invalid dimension: {exc}") from exc
    if axis_key not in header or len(header[axis_key]) != dims[0]:
        raise FormatError(f"{os.fspath(path)}: {axis_key!r} must list {dims[0]} values")
    payload = raw[nl + 1:]
    expected = int(np.prod(dims)) * _F32.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"{os.fspath(path)}: payload size mismatch, expected {expected} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype=_F32).reshape(dims)
    return header, data


def write_cube(cube: SpectralCube, path) -> None:
    L, H, W = cube.shape
    header = {"magic": CUBE_MAGIC, "L": L, "H": H, "W": W,
              "bands_nm": list(cube.bands.wavelengths_nm), "dtype": DTYPE_TAG}
    _write_container(path, header, cube.data)


def read_cube(path) -> SpectralCube:
    header, data = _read_container(path, CUBE_MAGIC, "bands_nm")
    return SpectralCube(BandGrid(tuple(header["bands_nm"])), data.astype(float))


def write_tensor(arr: np.ndarray, path, axis_values: Sequence[float] | None = None) -> None:
    """Store an arbitrary real L x H x W tensor (e.g. model inputs, which can be negative)."""
    arr = np.asarray(arr)
    L, H, W = arr.shape
    axis = list(axis_values) if axis_values is not None else [float(i) for i in range(L)]
    header = {"magic": CUBE_MAGIC, "L": L, "H": H, "W": W, "bands_nm": axis, "dtype": DTYPE_TAG}
    _write_container(path, header, arr)


def read_tensor(path) -> tuple[np.ndarray, list[float]]:
    header, data = _read_container(path, CUBE_MAGIC, "bands_nm")
    return data.astype(float), list(header["bands_nm"])


def write_stack(stack: GrayscaleStack, path) -> None:
    H, W = stack.shape
    header = {"magic": STACK_MAGIC, "L": len(stack), "H": H, "W": W,
              "positions_mm": list(stack.lens_positions_mm), "dtype": DTYPE_TAG}
    if stack.gain != 1.0:
        header["gain"] = stack.gain
    _write_container(path, header, stack.as_array())


def read_stack(path) -> GrayscaleStack:
    header, data = _read_container(path, STACK_MAGIC, "positions_mm")
    data = data.astype(float)
    n_clamped = int(np.count_nonzero((data < 0) | (data > 1)))
    if n_clamped:
        log.warning("%s: clamped %d out-of-range pixel values to [0, 1]", os.fspath(path), n_clamped)
        data = np.clip(data, 0.0, 1.0)
    return GrayscaleStack.from_array(data, header["positions_mm"], header.get("gain", 1.0))
