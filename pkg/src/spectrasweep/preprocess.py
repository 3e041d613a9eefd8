"""Input pipeline for the network: align the sweep, take Sobel edges, difference along the sweep."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import GrayscaleImage, GrayscaleStack

log = logging.getLogger(__name__)

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


class InsufficientCorrespondences(RuntimeError):
    pass


class DegenerateConfiguration(RuntimeError):
    pass


def _as_array(image) -> np.ndarray:
    return image.data if isinstance(image, GrayscaleImage) else np.asarray(image, dtype=float)


@dataclass(frozen=True)
class AffineTransform2D:
    """x' = a x + b y + tx,  y' = c x + d y + ty  (x = column, y = row)."""

    a: float = 1.0
    b: float = 0.0
    c: float = 0.0
    d: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    residual_rms: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if abs(self.a * self.d - self.b * self.c) <= 1e-9:
            raise DegenerateConfiguration("affine transform is not invertible")

    @classmethod
    def from_matrix(cls, m: np.ndarray, residual_rms: float = 0.0) -> "AffineTransform2D":
        return cls(m[0, 0], m[0, 1], m[1, 0], m[1, 1], m[0, 2], m[1, 2], residual_rms)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b, self.tx], [self.c, self.d, self.ty], [0.0, 0.0, 1.0]])

    def apply(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return xy @ self.matrix[:2, :2].T + self.matrix[:2, 2]

    def inverse(self) -> "AffineTransform2D":
        return AffineTransform2D.from_matrix(np.linalg.inv(self.matrix))

    def compose(self, first: "AffineTransform2D") -> "AffineTransform2D":
        """Transform applying ``first`` and then ``self``."""
        return AffineTransform2D.from_matrix(self.matrix @ first.matrix)

    def scale(self) -> float:
        return float(np.sqrt(abs(self.a * self.d - self.b * self.c)))


@dataclass(frozen=True)
class CornerSet:
    points: np.ndarray  # (N, 2) as (x, y)
    scores: np.ndarray

    def __len__(self):
        return len(self.scores)


# ---------------------------------------------------------------------------
# edges


def sobel_gradients(image) -> tuple[np.ndarray, np.ndarray]:
    """Correlation with SOBEL_X / SOBEL_Y under replicate padding.

    Evaluated in separable form (smooth [1, 2, 1], then central difference) so
    that flat regions give exact zeros.
    """
    img = _as_array(image)
    if min(img.shape) < 3:
        raise ValueError("Sobel needs at least a 3x3 image")
    p = np.pad(img, 1, mode="edge")
    sv = p[:-2, :] + 2.0 * p[1:-1, :] + p[2:, :]  # vertical smoothing, (H, W+2)
    sh = p[:, :-2] + 2.0 * p[:, 1:-1] + p[:, 2:]  # horizontal smoothing, (H+2, W)
    return sv[:, 2:] - sv[:, :-2], sh[2:, :] - sh[:-2, :]


def sobel_edges(image) -> np.ndarray:
    """Gradient magnitude with the 3x3 Sobel pair and replicate borders."""
    gx, gy = sobel_gradients(image)
    return np.hypot(gx, gy)


# ---------------------------------------------------------------------------
# corners and correspondences


def harris_response(img: np.ndarray, k: float = 0.04, sigma: float = 1.5) -> np.ndarray:
    gx, gy = sobel_gradients(img)
    sxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def detect_corners(image, max_corners: int = 200, quality: float = 0.01, nms_radius: int = 5,
                   border: int = 2, mask: np.ndarray | None = None) -> CornerSet:
    """Harris corners; ``mask`` (boolean) restricts where corners may be reported."""
    img = _as_array(image)
    if min(img.shape) < 16:
        raise ValueError("corner detection needs at least a 16x16 image")
    R = harris_response(img)
    if mask is not None:
        R = np.where(mask, R, 0.0)
    top = R.max()
    if not top > 1e-12:
        return CornerSet(np.zeros((0, 2)), np.zeros(0))
    peaks = (R == ndimage.maximum_filter(R, size=2 * nms_radius + 1, mode="constant", cval=-np.inf))
    peaks &= R >= quality * top
    peaks &= R > 0
    if border:
        peaks[:border, :] = peaks[-border:, :] = False
        peaks[:, :border] = peaks[:, -border:] = False
    rows, cols = np.nonzero(peaks)
    scores = R[rows, cols]
    order = np.lexsort((cols, rows, -scores))[:max_corners]  # ties resolved by raster order
    pts = np.column_stack([cols[order], rows[order]]).astype(float)
    return CornerSet(pts, scores[order])


def _patches(img: np.ndarray, pts: np.ndarray, half: int) -> np.ndarray:
    padded = np.pad(img, half, mode="reflect")
    ij = np.rint(pts[:, ::-1]).astype(int) + half
    out = np.empty((len(pts), (2 * half + 1) ** 2))
    for n, (i, j) in enumerate(ij):
        out[n] = padded[i - half:i + half + 1, j - half:j + half + 1].ravel()
    return out


def _normalize_rows(p: np.ndarray) -> np.ndarray:
    p = p - p.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(p, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norm > 1e-12, p / norm, np.nan)


@dataclass(frozen=True)
class Correspondences:
    src: np.ndarray  # (N, 2) x, y in image A
    dst: np.ndarray  # (N, 2) x, y in image B
    score: np.ndarray

    def __len__(self):
        return len(self.src)


def match_corners_nn(image_a, corners_a: CornerSet, image_b, corners_b: CornerSet, patch: int = 5,
                     max_dist_px: float = 8.0, min_matches: int = 3, min_ncc: float = 0.5) -> Correspondences:
    """Mutual-best NCC matching of corner patches within a search radius.

    Pairs scoring below ``min_ncc`` are discarded after the mutual-best check.
    """
    if len(corners_a) == 0 or len(corners_b) == 0:
        raise InsufficientCorrespondences("empty corner set")
    pa = _normalize_rows(_patches(_as_array(image_a), corners_a.points, patch))
    pb = _normalize_rows(_patches(_as_array(image_b), corners_b.points, patch))
    ncc = pa @ pb.T
    dist = np.linalg.norm(corners_a.points[:, None, :] - corners_b.points[None, :, :], axis=2)
    ncc = np.where((dist <= max_dist_px) & np.isfinite(ncc), ncc, -np.inf)
    best_b = np.argmax(ncc, axis=1)
    best_a = np.argmax(ncc, axis=0)
    keep = [i for i, j in enumerate(best_b) if ncc[i, j] >= min_ncc and best_a[j] == i]
    if len(keep) < min_matches:
        raise InsufficientCorrespondences(f"only {len(keep)} mutual matches (need {min_matches})")
    keep = np.array(keep)
    return Correspondences(corners_a.points[keep], corners_b.points[best_b[keep]], ncc[keep, best_b[keep]])


def fit_affine(corr: Correspondences) -> AffineTransform2D:
    """Least-squares affine map taking ``corr.src`` onto ``corr.dst``."""
    src = np.asarray(corr.src, dtype=float)
    dst = np.asarray(corr.dst, dtype=float)
    if len(src) < 3:
        raise InsufficientCorrespondences(f"need >= 3 correspondences, got {len(src)}")
    # x and y rows share the same 3-column design [x, y, 1]
    A = np.column_stack([src, np.ones(len(src))])
    if np.linalg.cond(A.T @ A) > 1e12:
        raise DegenerateConfiguration("correspondences are collinear or coincident")
    params, *_ = np.linalg.lstsq(A, dst, rcond=None)
    m = np.eye(3)
    m[:2, :] = params.T
    resid = A @ params - dst
    rms = float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))))
    return AffineTransform2D.from_matrix(m, rms)


def warp_affine(image, T: AffineTransform2D, out_shape: tuple[int, int] | None = None,
                fill: str = "zero") -> np.ndarray:
    """Resample so that output(T(p)) = image(p) with bilinear interpolation.

    Samples falling outside the source are 0 (``fill="zero"``) or take the
    nearest border value (``fill="edge"``).
    """
    img = _as_array(image)
    H, W = out_shape or img.shape
    inv = np.linalg.inv(T.matrix)
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    sx = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
    sy = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]
    return bilinear_sample(img, sx, sy, fill)


def bilinear_sample(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill: str = "zero") -> np.ndarray:
    H, W = img.shape
    eps = 1e-9
    inside = (sx >= -eps) & (sx <= W - 1 + eps) & (sy >= -eps) & (sy <= H - 1 + eps)
    sx = np.clip(sx, 0, W - 1)
    sy = np.clip(sy, 0, H - 1)
    x0 = np.minimum(np.floor(sx).astype(int), W - 2) if W > 1 else np.zeros_like(sx, int)
    y0 = np.minimum(np.floor(sy).astype(int), H - 2) if H > 1 else np.zeros_like(sy, int)
    fx, fy = sx - x0, sy - y0
    x1, y1 = np.minimum(x0 + 1, W - 1), np.minimum(y0 + 1, H - 1)
    out = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
           + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    if fill == "edge":
        return out
    if fill != "zero":
        raise ValueError(f"unknown fill mode {fill!r}")
    return np.where(inside, out, 0.0)


# ---------------------------------------------------------------------------
# stack alignment


@dataclass(frozen=True)
class AlignParams:
    max_corners: int = 300
    quality: float = 0.005
    patch: int = 5
    max_dist_px: float = 16.0
    refine_iters: int = 50
    refine_tol: float = 1e-4
    robust: float = 0.0


def fit_affine_trimmed(corr: Correspondences, passes: int = 3, floor_px: float = 1.0) -> AffineTransform2D:
    """Least-squares fit, repeatedly dropping matches far off the current model."""
    T = fit_affine(corr)
    for _ in range(passes):
        resid = np.linalg.norm(T.apply(corr.src) - corr.dst, axis=1)
        keep = resid <= max(3.0 * np.median(resid), floor_px)
        if keep.all() or keep.sum() < 3:
            break
        corr = Correspondences(corr.src[keep], corr.dst[keep], corr.score[keep])
        T = fit_affine(corr)
    return T


def _masked_corners(img: np.ndarray, valid: np.ndarray, p: AlignParams) -> CornerSet:
    # corners whose patch touches pixels without source data are unusable
    ok = ndimage.minimum_filter(valid.astype(np.uint8), size=2 * p.patch + 5, mode="constant", cval=0) > 0
    return detect_corners(img, p.max_corners, p.quality, mask=ok)


def refine_affine(fixed, moving, T: AffineTransform2D, fixed_valid: np.ndarray | None = None,
                  max_iter: int = 50, tol: float = 1e-4, robust: float = 0.0) -> AffineTransform2D:
    """Gauss-Newton refinement of ``T`` minimizing sum (warp(moving, T) - fixed)^2.

    Each step linearizes the warped image, solves for a small affine update in
    centred, unit-scaled coordinates and composes it onto ``T``. Only pixels
    with source data in both images (eroded by 2 px) enter the fit.
    """
    f = _as_array(fixed)
    m = _as_array(moving)
    H, W = f.shape
    ones = np.ones_like(m)
    cx, cy = (W - 1) / 2, (H - 1) / 2
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    X, Y = (xx - cx) / cx, (yy - cy) / cy
    fv = np.ones(f.shape, bool) if fixed_valid is None else fixed_valid
    for _ in range(max_iter):
        w = warp_affine(m, T)
        v = ndimage.binary_erosion((warp_affine(ones, T) > 1 - 1e-9) & fv, iterations=2)
        if v.sum() < 6:
            raise InsufficientCorrespondences("no overlap left for direct refinement")
        gy, gx = np.gradient(w)
        gx, gy, Xv, Yv = gx[v], gy[v], X[v], Y[v]
        J = np.column_stack([gx * Xv, gx * Yv, gx, gy * Xv, gy * Yv, gy])
        r = (w - f)[v]
        if robust > 0:
            # Huber weights with scale from the median absolute residual
            s = robust * max(1.4826 * np.median(np.abs(r)), 1e-6)
            wt = np.sqrt(np.minimum(1.0, s / np.maximum(np.abs(r), 1e-12)))
            J, r = J * wt[:, None], r * wt
        step, *_ = np.linalg.lstsq(J, r, rcond=None)
        # update u(x) = D (x - c) + t in pixels, applied after T
        D = np.array([[step[0] / cx, step[1] / cy], [step[3] / cx, step[4] / cy]])
        t = np.array([step[2], step[5]])
        U = np.eye(3)
        U[:2, :2] += D
        U[:2, 2] = t - D @ (cx, cy)
        T = AffineTransform2D.from_matrix(U @ T.matrix)
        if np.max(np.abs(step)) < tol:
            break
    return T


def align_stack(stack: GrayscaleStack, params: AlignParams | None = None
                ) -> tuple[GrayscaleStack, list[AffineTransform2D], float]:
    """Warp every frame into the middle frame's coordinates.

    Frames are processed outward from the reference. A frame is first matched
    to its raw neighbour by corner correspondences (the smallest magnification
    and focus change), and the chained estimate is then refined by direct
    intensity matching against that neighbour once it sits in reference
    coordinates. Uncovered output pixels repeat the nearest border value so no
    artificial edges enter the Sobel stage.

    Returns the aligned stack, per-frame transforms (frame -> reference) and the
    mean reprojection error over all neighbour corner matches under the final
    transforms. Mismatched corners stay in that mean, and corner positions sit
    on the pixel grid, so even a perfect alignment reports a few tenths of a pixel.
    """
    p = params or AlignParams()
    K = len(stack)
    if K < 2:
        raise ValueError("alignment needs at least two frames")
    frames = [f.data for f in stack.frames]
    ones = np.ones_like(frames[0])
    ref = K // 2
    transforms: list[AffineTransform2D | None] = [None] * K
    aligned: list[np.ndarray | None] = [None] * K
    valid: list[np.ndarray | None] = [None] * K
    transforms[ref], aligned[ref], valid[ref] = AffineTransform2D(), frames[ref], ones > 0
    errors = []
    for direction in (-1, 1):
        k = ref + direction
        while 0 <= k < K:
            prev = k - direction
            try:
                corr = match_corners_nn(frames[k], _masked_corners(frames[k], ones, p),
                                        frames[prev], _masked_corners(frames[prev], ones, p),
                                        p.patch, p.max_dist_px)
                step = fit_affine_trimmed(corr)
                T = refine_affine(aligned[prev], frames[k], transforms[prev].compose(step), valid[prev],
                                  p.refine_iters, p.refine_tol, p.robust)
            except (InsufficientCorrespondences, DegenerateConfiguration) as exc:
                raise InsufficientCorrespondences(f"frame {k}: {exc}") from exc
            # frame k -> frame prev implied by the final chain
            final_step = transforms[prev].inverse().compose(T)
            errors.extend(np.linalg.norm(final_step.apply(corr.src) - corr.dst, axis=1))
            transforms[k] = T
            aligned[k] = np.clip(warp_affine(frames[k], T, fill="edge"), 0, 1)
            valid[k] = (warp_affine(ones, T) > 1 - 1e-9) & valid[prev]
            k += direction
    mean_err = float(np.mean(errors)) if errors else 0.0
    log.info("aligned %d frames, mean corner reprojection error %.3f px", K, mean_err)
    out = GrayscaleStack.from_array(np.stack(aligned), stack.lens_positions_mm, stack.gain)
    return out, transforms, mean_err


# ---------------------------------------------------------------------------
# differencing and the full chain


def temporal_diff(frames) -> np.ndarray:
    arr = frames.as_array() if isinstance(frames, GrayscaleStack) else np.asarray(frames, dtype=float)
    if arr.shape[0] < 2:
        raise ValueError("temporal differencing needs at least two frames")
    return np.diff(arr, axis=0)


def preprocess_pipeline(stack: GrayscaleStack, *, align: bool = True, signed_gradients: bool = False,
                        raw_frames: bool = False, params: AlignParams | None = None) -> np.ndarray:
    """Model input tensor: temporal differences of per-frame Sobel edges of the aligned sweep.

    ``signed_gradients`` differences Gx and Gy separately (2(K-1) channels);
    ``raw_frames`` skips edges and differencing and returns the aligned frames.
    """
    if align:
        stack, _, _ = align_stack(stack, params)
    if raw_frames:
        return stack.as_array()
    if signed_gradients:
        gx, gy = zip(*(sobel_gradients(f) for f in stack.frames))
        return np.concatenate([temporal_diff(np.stack(gx)), temporal_diff(np.stack(gy))])
    return temporal_diff(np.stack([sobel_edges(f) for f in stack.frames]))
