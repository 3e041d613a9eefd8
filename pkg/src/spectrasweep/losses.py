"""Training / solver objective and evaluation metrics.

The objective combines a mean L1 term, an anisotropic spatio-spectral total
variation with Charbonnier smoothing, and SSIM computed on an RGB projection of
the cube. Every term has an analytic gradient with respect to the prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .core import BandGrid, SpectralCube

PERFECT = math.inf  # PSNR of identical inputs


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, SpectralCube) else np.asarray(x, dtype=float)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class LossWeights:
    lambda_tv: float = 0.1
    gamma_tvs: float = 0.2
    lambda_ssim: float = 0.9
    tv_on_residual: bool = False
    epsilon: float = 1e-8

    def __post_init__(self):
        if min(self.lambda_tv, self.gamma_tvs, self.lambda_ssim) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class SsimParams:
    size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def window(self) -> np.ndarray:
        r = np.arange(self.size) - (self.size - 1) / 2
        g = np.exp(-r ** 2 / (2 * self.sigma ** 2))
        w = np.outer(g, g)
        return w / w.sum()


# ---------------------------------------------------------------------------
# RGB projection


def _lobe(lam, mu, s1, s2):
    s = np.where(lam < mu, s1, s2)
    return np.exp(-0.5 * ((lam - mu) / s) ** 2)


def cmf_xyz(lam_nm) -> np.ndarray:
    """Multi-lobe Gaussian fit of the CIE 1931 2-degree colour-matching functions, shape (3, n)."""
    lam = np.asarray(lam_nm, dtype=float)
    x = 1.056 * _lobe(lam, 599.8, 37.9, 31.0) + 0.362 * _lobe(lam, 442.0, 16.0, 26.7) \
        - 0.065 * _lobe(lam, 501.1, 20.4, 26.2)
    y = 0.821 * _lobe(lam, 568.8, 46.9, 40.5) + 0.286 * _lobe(lam, 530.9, 16.3, 31.1)
    z = 1.217 * _lobe(lam, 437.0, 11.8, 36.0) + 0.681 * _lobe(lam, 459.0, 26.0, 13.8)
    return np.stack([x, y, z])


@dataclass(frozen=True)
class RGBProjection:
    matrix: np.ndarray  # (3, L)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != 3:
            raise ValueError("projection matrix must be 3 x L")
        if np.any(m < 0) or not np.allclose(m.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("projection rows must be non-negative and sum to 1")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def default(cls, bands: BandGrid | np.ndarray, cutoff_nm: float = 780.0) -> "RGBProjection":
        """Sampled colour-matching functions mapped to linear sRGB primaries.

        Negative sRGB lobes are clipped, bands beyond ``cutoff_nm`` are zeroed
        and each row is normalized to sum to one.
        """
        lam = np.asarray(bands.wavelengths_nm if isinstance(bands, BandGrid) else bands, dtype=float)
        xyz_to_rgb = np.array([[3.2406, -1.5372, -0.4986],
                               [-0.9689, 1.8758, 0.0415],
                               [0.0557, -0.2040, 1.0570]])
        m = np.clip(xyz_to_rgb @ cmf_xyz(lam), 0.0, None)
        m[:, lam > cutoff_nm] = 0.0
        sums = m.sum(axis=1, keepdims=True)
        if np.any(sums <= 0):
            raise ValueError("band grid has no visible band for one of the RGB channels")
        return cls(m / sums)


def rgb_project(cube, proj: RGBProjection) -> np.ndarray:
    x = _arr(cube)
    if x.shape[0] != proj.matrix.shape[1]:
        raise ValueError(f"projection expects {proj.matrix.shape[1]} bands, cube has {x.shape[0]}")
    return np.tensordot(proj.matrix, x, axes=(1, 0))


# ---------------------------------------------------------------------------
# L1 and TV


def l1_loss(y, yhat) -> float:
    a, b = _arr(y), _arr(yhat)
    _same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_grad(y, yhat) -> np.ndarray:
    a, b = _arr(y), _arr(yhat)
    return np.sign(b - a) / a.size


def _forward_diffs(x: np.ndarray):
    dk = np.zeros_like(x)
    dv = np.zeros_like(x)
    dh = np.zeros_like(x)
    dk[:-1] = x[1:] - x[:-1]
    dv[:, :-1] = x[:, 1:] - x[:, :-1]
    dh[:, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    return dh, dv, dk


def _tv_terms(x: np.ndarray, gamma: float, eps: float):
    dh, dv, dk = _forward_diffs(x)
    t = np.sqrt(dh ** 2 + dv ** 2 + gamma * dk ** 2 + eps ** 2)
    # the far corner voxel has no forward neighbour on any axis and carries no term
    t[-1, -1, -1] = 0.0
    return dh, dv, dk, t


def tv_loss(x, gamma_tvs: float = 0.2, epsilon: float = 1e-8) -> float:
    """Anisotropic spatio-spectral TV, mean over voxels.

    Per voxel: sqrt(dh^2 + dv^2 + gamma * dk^2 + eps^2) with forward differences
    along width (dh), height (dv) and bands (dk), zero at each axis' last index.
    """
    a = _arr(x)
    if a.ndim != 3:
        raise ValueError("tv_loss expects an (L, H, W) tensor")
    *_, t = _tv_terms(a, gamma_tvs, epsilon)
    return float(t.sum() / a.size)


def tv_grad(x, gamma_tvs: float = 0.2, epsilon: float = 1e-8) -> np.ndarray:
    a = _arr(x)
    dh, dv, dk, t = _tv_terms(a, gamma_tvs, epsilon)
    inv = np.zeros_like(t)
    np.divide(1.0, t, out=inv, where=t > 0)
    gh, gv, gk = dh * inv, dv * inv, gamma_tvs * dk * inv
    g = -(gh + gv + gk)
    g[:, :, 1:] += gh[:, :, :-1]
    g[:, 1:] += gv[:, :-1]
    g[1:] += gk[:-1]
    return g / a.size


# ---------------------------------------------------------------------------
# SSIM


def _window_stats(a: np.ndarray, b: np.ndarray, w: np.ndarray):
    def G(img):
        return np.stack([signal.correlate(c, w, mode="valid", method="direct") for c in img])
    mu_a, mu_b = G(a), G(b)
    return mu_a, mu_b, G(a * a), G(b * b), G(a * b)


def _ssim_parts(a, b, params: SsimParams):
    if a.ndim == 2:
        a, b = a[None], b[None]
    _same_shape(a, b)
    if min(a.shape[1:]) < params.size:
        raise ValueError(f"SSIM needs images of at least {params.size}x{params.size}")
    w = params.window()
    C1 = (params.k1 * params.dynamic_range) ** 2
    C2 = (params.k2 * params.dynamic_range) ** 2
    mu_a, mu_b, e_aa, e_bb, e_ab = _window_stats(a, b, w)
    A1 = 2 * mu_a * mu_b + C1
    A2 = 2 * (e_ab - mu_a * mu_b) + C2
    B1 = mu_a ** 2 + mu_b ** 2 + C1
    B2 = (e_aa - mu_a ** 2) + (e_bb - mu_b ** 2) + C2
    return a, b, w, mu_a, mu_b, A1, A2, B1, B2


def ssim(a, b, params: SsimParams | None = None) -> float:
    """Mean SSIM over channels and all valid window positions."""
    *_, A1, A2, B1, B2 = _ssim_parts(_arr(a), _arr(b), params or SsimParams())
    return float(np.mean(A1 * A2 / (B1 * B2)))


def ssim_grad(a, b, params: SsimParams | None = None) -> np.ndarray:
    """Gradient of ``ssim(a, b)`` with respect to ``b``."""
    squeeze = _arr(b).ndim == 2
    a, b, w, mu_a, mu_b, A1, A2, B1, B2 = _ssim_parts(_arr(a), _arr(b), params or SsimParams())
    den = B1 * B2
    S = A1 * A2 / den
    # partials with respect to the local statistics mu_b, E[b^2], E[ab]
    d_mu = (2 * mu_a * A2 - 2 * mu_a * A1) / den - S * (2 * mu_b * B2 - 2 * mu_b * B1) / den
    d_ebb = -S / B2
    d_eab = 2 * A1 / den
    n = S.size

    def Gt(m):  # adjoint of the valid-mode window correlation
        return np.stack([signal.convolve(c, w, mode="full", method="direct") for c in m])

    g = (Gt(d_mu) + 2 * b * Gt(d_ebb) + a * Gt(d_eab)) / n
    return g[0] if squeeze else g


# ---------------------------------------------------------------------------
# combined objective


def combined_loss(y, yhat, weights: LossWeights | None = None, proj: RGBProjection | None = None,
                  ssim_params: SsimParams | None = None) -> float:
    wts = weights or LossWeights()
    a, b = _arr(y), _arr(yhat)
    _same_shape(a, b)
    total = l1_loss(a, b)
    if wts.lambda_tv:
        total += wts.lambda_tv * tv_loss(a - b if wts.tv_on_residual else b, wts.gamma_tvs, wts.epsilon)
    if wts.lambda_ssim:
        P = proj or _default_proj(a.shape[0])
        total += wts.lambda_ssim * (1.0 - ssim(rgb_project(a, P), rgb_project(b, P), ssim_params))
    return total


def grad_combined(y, yhat, weights: LossWeights | None = None, proj: RGBProjection | None = None,
                  ssim_params: SsimParams | None = None) -> np.ndarray:
    """Analytic gradient of ``combined_loss`` with respect to ``yhat``."""
    wts = weights or LossWeights()
    a, b = _arr(y), _arr(yhat)
    _same_shape(a, b)
    g = l1_grad(a, b)
    if wts.lambda_tv:
        if wts.tv_on_residual:
            g -= wts.lambda_tv * tv_grad(a - b, wts.gamma_tvs, wts.epsilon)
        else:
            g += wts.lambda_tv * tv_grad(b, wts.gamma_tvs, wts.epsilon)
    if wts.lambda_ssim:
        P = proj or _default_proj(a.shape[0])
        g_rgb = ssim_grad(rgb_project(a, P), rgb_project(b, P), ssim_params)
        g -= wts.lambda_ssim * np.tensordot(P.matrix, g_rgb, axes=(0, 0))
    return g


def _default_proj(n_bands: int) -> RGBProjection:
    return RGBProjection.default(BandGrid.uniform(n_bands))


# ---------------------------------------------------------------------------
# metrics


def psnr(y, yhat, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``PERFECT`` (+inf)."""
    a, b = _arr(y), _arr(yhat)
    _same_shape(a, b)
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PERFECT
    return 10.0 * math.log10(max_value ** 2 / mse)


METRICS = ("psnr_db", "ssim", "ssim_rgb", "l1")
_HIGHER_IS_BETTER = {"psnr_db": True, "ssim": True, "ssim_rgb": True, "l1": False}


@dataclass
class MetricReport:
    pairs: list[dict] = field(default_factory=list)
    aggregates: dict[str, dict[str, float]] = field(default_factory=dict)  # Best / Worst / Mean

    def to_json(self) -> dict:
        def clean(v):
            return "perfect" if v == PERFECT else v
        return {"pairs": [{k: clean(v) for k, v in p.items()} for p in self.pairs],
                "aggregates": {row: {k: clean(v) for k, v in vals.items()}
                               for row, vals in self.aggregates.items()}}

    def table(self) -> str:
        """Text table with one row per metric and Best / Worst / Mean columns."""
        names = {"psnr_db": "PSNR", "ssim": "SSIM", "ssim_rgb": "SSIM (RGB)", "l1": "L1"}
        lines = [f"{'':<12}{'Best':>10}{'Worst':>10}{'Mean':>10}"]
        for m in METRICS:
            cells = []
            for col in ("Best", "Worst", "Mean"):
                v = self.aggregates[col][m]
                cells.append(f"{'perfect' if v == PERFECT else f'{v:.3f}':>10}")
            lines.append(f"{names[m]:<12}" + "".join(cells))
        return "\n".join(lines)


def evaluate(preds, truths, proj: RGBProjection | None = None, max_value: float = 1.0) -> MetricReport:
    """Per-pair PSNR / SSIM / L1 plus Best, Worst and Mean over the set.

    ``ssim`` is the cube-domain value (windowed SSIM per band, averaged) and
    ``ssim_rgb`` is computed on the RGB projection.
    """
    preds, truths = list(preds), list(truths)
    if not preds:
        raise ValueError("evaluate needs at least one prediction/truth pair")
    if len(preds) != len(truths):
        raise ValueError("prediction and truth lists differ in length")
    report = MetricReport()
    for p, t in zip(preds, truths):
        pa, ta = _arr(p), _arr(t)
        _same_shape(pa, ta)
        P = proj or (RGBProjection.default(t.bands) if isinstance(t, SpectralCube) else _default_proj(ta.shape[0]))
        report.pairs.append({
            "psnr_db": psnr(ta, pa, max_value),
            "ssim": ssim(ta, pa),
            "ssim_rgb": ssim(rgb_project(ta, P), rgb_project(pa, P)),
            "l1": l1_loss(ta, pa),
        })
    for col in ("Best", "Worst", "Mean"):
        report.aggregates[col] = {}
        for m in METRICS:
            vals = [p[m] for p in report.pairs]
            if col == "Mean":
                report.aggregates[col][m] = float(np.mean(vals))
            else:
                best = max(vals) if _HIGHER_IS_BETTER[m] else min(vals)
                worst = min(vals) if _HIGHER_IS_BETTER[m] else max(vals)
                report.aggregates[col][m] = float(best if col == "Best" else worst)
    return report
