"""Augmentation, Adam training loop and prediction for the network path."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..core import BandGrid, SpectralCube
from ..losses import LossWeights, RGBProjection, combined_loss, grad_combined
from .net import NetConfig, NetParams, net_backward, net_forward, net_init

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    translate: bool = False
    max_shift_px: float = 8.0
    rotate: bool = False
    max_angle_deg: float = 15.0
    crop: bool = False
    min_crop_scale: float = 0.8
    hflip: bool = False
    vflip: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.max_shift_px <= 8:
            raise ValueError("max_shift_px must be within [0, 8]")
        if not 0 <= self.max_angle_deg <= 15:
            raise ValueError("max_angle_deg must be within [0, 15]")
        if not 0.8 <= self.min_crop_scale <= 1.0:
            raise ValueError("min_crop_scale must be within [0.8, 1.0]")

    @classmethod
    def all_on(cls, seed: int = 0) -> "AugmentConfig":
        return cls(True, 8.0, True, 15.0, True, 0.8, True, True, seed)


@dataclass(frozen=True)
class AugmentDraw:
    shift: tuple[float, float] = (0.0, 0.0)  # (dx, dy) px
    angle_deg: float = 0.0
    crop_scale: float = 1.0
    hflip: bool = False
    vflip: bool = False


def draw_augment(config: AugmentConfig, index: int) -> AugmentDraw:
    """Random transform for sample ``index``; identical for identical (seed, index)."""
    rng = np.random.default_rng([config.seed, index])
    u = rng.random(7)
    s = config.max_shift_px
    return AugmentDraw(
        shift=(float((2 * u[0] - 1) * s), float((2 * u[1] - 1) * s)) if config.translate else (0.0, 0.0),
        angle_deg=float((2 * u[2] - 1) * config.max_angle_deg) if config.rotate else 0.0,
        crop_scale=float(config.min_crop_scale + u[3] * (1 - config.min_crop_scale)) if config.crop else 1.0,
        hflip=bool(config.hflip and u[4] < 0.5),
        vflip=bool(config.vflip and u[5] < 0.5),
    )


def apply_augment(t: np.ndarray, d: AugmentDraw) -> np.ndarray:
    """Apply one geometric draw to every channel of a (C, H, W) tensor.

    Crop, rotation and shift act about the image centre as a single bilinear
    resampling (zero outside); flips are exact index reversals.
    """
    out = np.asarray(t, dtype=float)
    if d.shift != (0.0, 0.0) or d.angle_deg or d.crop_scale != 1.0:
        _, H, W = out.shape
        c = np.array([(H - 1) / 2, (W - 1) / 2])
        th = math.radians(d.angle_deg)
        # output -> input map in (row, col): crop scale < 1 zooms in
        R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]]) * d.crop_scale
        shift_rc = np.array([d.shift[1], d.shift[0]])
        offset = c - R @ (c + shift_rc)
        out = np.stack([ndimage.affine_transform(ch, R, offset=offset, order=1, mode="constant", cval=0.0)
                        for ch in out])
    if d.hflip:
        out = out[:, :, ::-1]
    if d.vflip:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def augment(pair, config: AugmentConfig, index: int = 0):
    """Same random geometric transform applied to the input channels and target bands."""
    x, y = pair
    d = draw_augment(config, index)
    return apply_augment(x, d), apply_augment(y, d)


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: NetParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for key, g in grads.items():
            layer, kind = key.rsplit(".", 1)
            p = params.weights[layer] if kind == "w" else params.biases[layer]
            m = self.m.setdefault(key, np.zeros_like(g))
            v = self.v.setdefault(key, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(dataset, config: NetConfig, weights: LossWeights | None = None, epochs: int = 200,
          lr: float = 1e-3, seed: int = 0, augment_config: AugmentConfig | None = None,
          proj: RGBProjection | None = None, init: NetParams | None = None,
          lr_final: float | None = None, restart_every: int | None = None):
    """Adam on combined_loss(target, net(input)), one sample per step.

    Returns the trained parameters and the per-epoch mean training loss.
    Sample order is shuffled per epoch from ``seed``; augmentation draws are
    indexed by (epoch, sample) so the whole run is reproducible. With
    ``lr_final`` set, the step size follows a cosine from ``lr`` down to it.
    With ``restart_every`` set, Adam's moment estimates are cleared every that
    many epochs (warm restarts), which helps a single-sample fit escape the
    slow plateau a continuous run settles into.
    """
    if restart_every is not None and restart_every < 1:
        raise ValueError("restart_every must be a positive number of epochs")
    data = [(np.asarray(x, float), np.asarray(y, float)) for x, y in dataset]
    if not data:
        raise ValueError("dataset is empty")
    if any(x.shape != data[0][0].shape or y.shape != data[0][1].shape for x, y in data):
        raise ValueError("all samples must share input and target shapes")
    wts = weights or LossWeights()
    params = (init or net_init(config)).copy()
    opt = Adam(lr)
    curve = []
    for epoch in range(epochs):
        if restart_every and epoch and epoch % restart_every == 0:
            opt = Adam(opt.lr)
        if lr_final is not None:
            opt.lr = lr_final + (lr - lr_final) * 0.5 * (1 + math.cos(math.pi * epoch / max(epochs - 1, 1)))
        order = np.random.default_rng([seed, epoch]).permutation(len(data))
        total = 0.0
        for i in order:
            x, y = data[i]
            if augment_config is not None:
                x, y = augment((x, y), augment_config, index=epoch * len(data) + int(i))
            out = net_forward(params, x)
            loss = combined_loss(y, out, wts, proj)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, sample {int(i)}")
            grads, _ = net_backward(params, x, grad_combined(y, out, wts, proj))
            opt.step(params, grads)
            total += loss
        curve.append(total / len(data))
        log.debug("epoch %d: loss %.6f", epoch + 1, curve[-1])
    return params, curve


def predict(params: NetParams, preprocessed: np.ndarray, bands: BandGrid | None = None) -> SpectralCube:
    out = np.maximum(net_forward(params, preprocessed), 0.0)
    grid = bands or BandGrid.uniform(params.config.c_out)
    if len(grid) != out.shape[0]:
        raise ValueError(f"band grid has {len(grid)} bands, network outputs {out.shape[0]}")
    return SpectralCube(grid, out)
