"""Physics-based reconstruction: invert the focal-sweep forward model directly.

Minimizes  J(x) = sum_k ||A_k x - f_k||^2 / K + lambda_TV * TV(x)  over x >= 0,
where A_k renders the cube at lens position k with the stack's normalization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..core import BandGrid, GrayscaleStack, SpectralCube
from ..forward import SensorResponse, _fold_edge_padding, frame_kernels
from ..losses import LossWeights, tv_grad, tv_loss
from ..optics import AcquisitionGeometry, FocusSchedule, LensConfig, focused_wavelength

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    step_size: float | None = None  # None: 1 / (estimated Lipschitz constant)
    momentum: float = 0.9
    max_iters: int = 1000
    grad_tol: float = 1e-7
    weights: LossWeights = field(default_factory=lambda: LossWeights(lambda_tv=1e-3, lambda_ssim=0.0))
    psf: str = "disc"

    def __post_init__(self):
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


class ForwardOperator:
    """Linear map from an (L, H, W) cube to the (K, H, W) normalized frames.

    Equivalent to ``render_frame`` at every lens position divided by ``gain``,
    evaluated in the Fourier domain: every band is edge-padded by the largest
    kernel radius and transformed once, then shared by all K frames.
    """

    def __init__(self, bands: BandGrid, lens: LensConfig, geometry: AcquisitionGeometry,
                 positions_mm, response: SensorResponse | None = None, gain: float = 1.0,
                 psf: str = "disc"):
        wl = bands.wavelengths_nm
        self.weights = (response or SensorResponse.flat(len(wl))).array
        if len(self.weights) != len(wl):
            raise ValueError("sensor response length differs from band count")
        self.kernels = [frame_kernels(wl, lens, geometry, z, psf) for z in positions_mm]
        self.gain = float(gain)
        self.H, self.W = geometry.sensor_px
        self.R = max(k.shape[0] // 2 for ks in self.kernels for k in ks)
        self.shape = (self.H + 2 * self.R, self.W + 2 * self.R)
        # out[i] = sum_t k[t] p[i + t - r]: correlation, i.e. convolution with the flipped kernel
        spec = np.empty((len(self.kernels), len(wl), self.shape[0], self.shape[1] // 2 + 1), complex)
        for k, ks in enumerate(self.kernels):
            for b, ker in enumerate(ks):
                spec[k, b] = np.fft.rfft2(self._embed_flipped(ker), self.shape)
        self._spec = spec * (self.weights[None, :, None, None] / self.gain)

    def _embed_flipped(self, ker: np.ndarray) -> np.ndarray:
        r = ker.shape[0] // 2
        e = np.zeros(self.shape)
        flipped = ker[::-1, ::-1]
        for dy in range(-r, r + 1):  # place tap (dy, dx) of the flipped kernel at index (dy, dx) mod shape
            e[dy % self.shape[0], np.arange(-r, r + 1) % self.shape[1]] = flipped[dy + r]
        return e

    def __call__(self, x: np.ndarray) -> np.ndarray:
        R, H, W = self.R, self.H, self.W
        X = np.fft.rfft2(np.pad(x, ((0, 0), (R, R), (R, R)), mode="edge"), axes=(1, 2))
        Y = np.einsum("kbij,bij->kij", self._spec, X)
        return np.fft.irfft2(Y, self.shape, axes=(1, 2))[:, R:R + H, R:R + W]

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        R, H, W = self.R, self.H, self.W
        e = np.zeros((y.shape[0],) + self.shape)
        e[:, R:R + H, R:R + W] = y
        Yf = np.fft.rfft2(e, axes=(1, 2))
        Xf = np.einsum("kbij,kij->bij", self._spec.conj(), Yf)
        full = np.fft.irfft2(Xf, self.shape, axes=(1, 2))
        if R == 0:
            return full
        return np.stack([_fold_edge_padding(p, R) for p in full])


@dataclass
class SolverResult:
    cube: SpectralCube
    objective: list[float]  # J of every accepted iterate, starting with the initial guess
    iterations: int
    converged: bool


def _lipschitz(A: ForwardOperator, shape, K: int, iters: int = 20, seed: int = 0) -> float:
    x = np.random.default_rng(seed).standard_normal(shape)
    lam = 1.0
    for _ in range(iters):
        y = A.adjoint(A(x))
        lam = float(np.linalg.norm(y))
        x = y / lam
    return 2.0 * lam / K


def initial_guess(stack: GrayscaleStack, bands: BandGrid, schedule: FocusSchedule, weights: np.ndarray) -> np.ndarray:
    """Each band starts as the frame that focuses the nearest wavelength, rescaled to radiance."""
    frames = stack.as_array()
    focus = np.array([focused_wavelength(schedule, z) for z in stack.lens_positions_mm])
    scale = stack.gain / max(float(np.sum(weights)), 1e-12)
    x0 = np.empty((len(bands),) + frames.shape[1:])
    for b, wl in enumerate(bands.wavelengths_nm):
        x0[b] = frames[int(np.argmin(np.abs(focus - wl)))] * scale
    return x0


def variational_reconstruct(stack: GrayscaleStack, lens: LensConfig, geometry: AcquisitionGeometry,
                            schedule: FocusSchedule, bands: BandGrid,
                            response: SensorResponse | None = None,
                            config: SolverConfig | None = None) -> SolverResult:
    """Projected momentum gradient descent with backtracking.

    A step that raises J is rejected: the step size halves and momentum resets.
    Ten consecutive rejections raise ``DivergenceError``. The lowest-J iterate is
    returned.
    """
    cfg = config or SolverConfig()
    if tuple(stack.lens_positions_mm) != tuple(schedule.positions_mm):
        raise ValueError("stack positions do not match the focus schedule")
    K = len(stack)
    response = response or SensorResponse.flat(len(bands))
    A = ForwardOperator(bands, lens, geometry, schedule.positions_mm, response, stack.gain, cfg.psf)
    f = stack.as_array()
    lam, gamma, eps = cfg.weights.lambda_tv, cfg.weights.gamma_tvs, cfg.weights.epsilon

    def objective(x):
        r = A(x) - f
        J = float(np.sum(r * r)) / K
        if lam:
            J += lam * tv_loss(x, gamma, eps)
        return J, r

    def gradient(x, r):
        g = 2.0 * A.adjoint(r) / K
        if lam:
            g += lam * tv_grad(x, gamma, eps)
        return g

    x = np.maximum(initial_guess(stack, bands, schedule, response.array), 0.0)
    shape = x.shape
    step = cfg.step_size or 1.0 / _lipschitz(A, shape, K)
    J, r = objective(x)
    history = [J]
    v = np.zeros(shape)
    rejects = 0
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        g = gradient(x, r)
        # projected gradient: components pushing into the x >= 0 bound do not count
        pg = np.where((x <= 0) & (g > 0), 0.0, g)
        if np.linalg.norm(pg) / np.sqrt(pg.size) < cfg.grad_tol:
            converged = True
            break
        v = cfg.momentum * v - step * g
        x_new = np.maximum(x + v, 0.0)
        J_new, r_new = objective(x_new)
        if J_new <= J:
            x, J, r = x_new, J_new, r_new
            history.append(J)
            rejects = 0
        else:
            rejects += 1
            if rejects >= 10:
                raise DivergenceError(f"objective rose on 10 consecutive iterations (step {step:.3g}); "
                                      "use a smaller step_size")
            step *= 0.5
            v[:] = 0.0
    log.info("variational solve: %d iterations, J=%.6g", it, J)
    # accepted iterates never increase J, so the current one is the best
    return SolverResult(SpectralCube(bands, x), history, it, converged)
