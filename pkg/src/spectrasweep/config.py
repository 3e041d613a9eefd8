"""Toy-scale defaults and the JSON run configuration shared by the CLI."""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from typing import Any

from .core import BandGrid
from .forward import NoiseModel
from .losses import LossWeights
from .optics import AcquisitionGeometry, FocusSchedule, LensConfig, schedule_for_bands
from .reconstruct.net import NetConfig
from .reconstruct.variational import SolverConfig


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def toy_lens() -> LensConfig:
    # short focal length keeps the far-object focus law accurate (residual blur < 0.5 px)
    return LensConfig(n0=1.5, h_nm=685.0, lambda0_nm=685.0, f0_mm=20.0, aperture_mm=0.15)


def toy_geometry(size: int = 64) -> AcquisitionGeometry:
    return AcquisitionGeometry(u_mm=1300.0, z0_mm=15.0, z1_mm=30.0, pixel_pitch_um=2.5,
                               sensor_px=(size, size))


@dataclass(frozen=True)
class SceneConfig:
    n_bands: int = 8
    n_shapes: int = 7
    background: float = 0.0
    seed: int = 3

    def __post_init__(self):
        if self.n_bands < 1 or self.n_shapes < 0:
            raise ValueError("n_bands must be >= 1 and n_shapes >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 3e-3
    lr_final: float | None = None  # cosine decay target; None keeps lr constant
    restart_every: int | None = None  # clear Adam moments every this many epochs
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 1 or self.lr < 0:
            raise ValueError("epochs must be >= 1 and lr >= 0")
        if self.restart_every is not None and self.restart_every < 1:
            raise ValueError("restart_every must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run depends on.

    ``positions_mm`` overrides the lens schedule; by default one position per band,
    each focusing that band. ``checkpoint`` is required when ``method`` is "net".
    With ``magnify`` on, ``align`` should be on too, or the frames stay misregistered.
    """

    lens: LensConfig = field(default_factory=toy_lens)
    geometry: AcquisitionGeometry = field(default_factory=toy_geometry)
    scene: SceneConfig = field(default_factory=SceneConfig)
    positions_mm: tuple[float, ...] | None = None
    noise: NoiseModel = field(default_factory=NoiseModel)
    magnify: bool = False  # keep each frame's magnification change, as on a real sweep
    align: bool = False
    raw_frames: bool = False  # feed the aligned frames to the network, skipping edges and differencing
    method: str = "variational"
    solver: SolverConfig = field(default_factory=SolverConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    checkpoint: str | None = None

    def __post_init__(self):
        if self.method not in ("variational", "net"):
            raise ValueError(f"method must be 'variational' or 'net', got {self.method!r}")
        if self.method == "net":
            if not self.checkpoint:
                raise ValueError("method 'net' needs a checkpoint path")
            if not os.path.isfile(self.checkpoint):
                raise ValueError(f"checkpoint {self.checkpoint!r} does not exist")

    @property
    def bands(self) -> BandGrid:
        return BandGrid.uniform(self.scene.n_bands)

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.geometry.sensor_px)

    def schedule(self, bands: BandGrid | None = None) -> FocusSchedule:
        matched = schedule_for_bands(self.lens, self.geometry, bands or self.bands)
        if self.positions_mm is None:
            return matched
        return dataclasses.replace(matched, positions_mm=tuple(self.positions_mm))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        try:
            return _build(cls, data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _tuples(v):
    if isinstance(v, list):
        return tuple(_tuples(x) for x in v)
    return v


def _build(cls, data, base=None):
    """Overlay nested dicts onto ``base`` (or ``cls()``), rejecting unknown keys.

    Keys left out keep the base value, so ``{"lens": {"aperture_mm": 0.05}}``
    changes only the aperture of the toy lens.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__}: expected a JSON object, got {type(data).__name__}")
    base = base if base is not None else cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, getattr(base, key))
        else:
            kwargs[key] = _tuples(value)
    return dataclasses.replace(base, **kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {os.fspath(path)!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{os.fspath(path)}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return RunConfig.from_dict(data)
