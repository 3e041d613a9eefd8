"""Map a ground-truth cube into camera coordinates.

Oriented FAST-style corners with intensity-centroid orientation, rotated BRIEF
descriptors, brute-force Hamming matching and a RANSAC homography refined by the
normalized DLT on all inliers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import GrayscaleImage, SpectralCube
from .preprocess import bilinear_sample, harris_response

log = logging.getLogger(__name__)

N_BITS = 256
PATCH = 31
HALF = PATCH // 2  # 15
_PATTERN_SEED = 20240531


class RegistrationError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class DegenerateHomography(RegistrationError):
    def __init__(self, message: str):
        super().__init__("dlt", message)


def _img(image) -> np.ndarray:
    return image.data if isinstance(image, GrayscaleImage) else np.asarray(image, dtype=float)


# ---------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class OrientedFeature:
    x: float
    y: float
    angle: float  # radians in [-pi, pi)
    score: float


# Bresenham circle of radius 3 used by the FAST segment test
_RING = np.array([(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
                  (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)])


def _fast_mask(img: np.ndarray, threshold: float, arc: int = 9) -> np.ndarray:
    """Pixels with ``arc`` contiguous ring pixels all brighter or all darker than centre +- threshold."""
    H, W = img.shape
    p = np.pad(img, 3, mode="edge")
    ring = np.stack([p[3 + dy:3 + dy + H, 3 + dx:3 + dx + W] for dx, dy in _RING])
    out = np.zeros((H, W), bool)
    for sign in (1.0, -1.0):
        hit = sign * (ring - img) > threshold
        wrapped = np.concatenate([hit, hit[:arc - 1]])
        run = np.ones((H, W), bool)
        best = np.zeros((H, W), bool)
        for start in range(16):
            run = np.all(wrapped[start:start + arc], axis=0)
            best |= run
        out |= best
    return out


def _orientation(img: np.ndarray, x: int, y: int) -> float:
    patch = img[y - HALF:y + HALF + 1, x - HALF:x + HALF + 1]
    d = np.arange(-HALF, HALF + 1, dtype=float)
    dx, dy = np.meshgrid(d, d)
    disc = dx ** 2 + dy ** 2 <= HALF ** 2
    m10 = float(np.sum(dx * patch * disc))
    m01 = float(np.sum(dy * patch * disc))
    a = math.atan2(m01, m10)
    return a if a < math.pi else -math.pi


def detect_oriented_features(image, n: int = 500, fast_threshold: float = 0.05, nms_radius: int = 3
                             ) -> list[OrientedFeature]:
    """FAST-9 candidates ranked by Harris score, with intensity-centroid orientation.

    Only features at least 16 px from the border are kept so every one can be
    described.
    """
    img = _img(image)
    if min(img.shape) < 32:
        raise ValueError("feature detection needs at least a 32x32 image")
    if np.ptp(img) == 0:
        return []
    H, W = img.shape
    cand = _fast_mask(img, fast_threshold * float(np.ptp(img)))
    score = harris_response(img)
    cand &= score > 0
    cand &= score == ndimage.maximum_filter(score, size=2 * nms_radius + 1, mode="nearest")
    border = HALF + 1
    cand[:border], cand[-border:], cand[:, :border], cand[:, -border:] = False, False, False, False
    rows, cols = np.nonzero(cand)
    order = np.lexsort((cols, rows, -score[rows, cols]))[:n]
    feats = []
    for i in order:
        r, c = rows[i], cols[i]
        feats.append(OrientedFeature(c + _vertex(score[r, c - 1:c + 2]), r + _vertex(score[r - 1:r + 2, c]),
                                     _orientation(img, c, r), float(score[r, c])))
    return feats


def _vertex(v: np.ndarray) -> float:
    """Sub-pixel offset of a 3-sample peak from the parabola through it."""
    den = v[0] - 2 * v[1] + v[2]
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (v[0] - v[2]) / den, -0.5, 0.5))


# ---------------------------------------------------------------------------
# descriptors


def _make_pattern() -> np.ndarray:
    """256 point pairs inside the patch, Gaussian-distributed (sigma = patch/5)."""
    rng = np.random.default_rng(_PATTERN_SEED)
    # keep every rotated sample inside the 31 x 31 patch
    lim = math.floor(HALF / math.sqrt(2))
    pts = np.clip(np.rint(rng.normal(0.0, PATCH / 5.0, size=(N_BITS, 4))), -lim, lim)
    while True:  # a pair with p == q would be a constant bit; redraw those
        same = np.all(pts[:, :2] == pts[:, 2:], axis=1)
        if not same.any():
            return pts
        pts[same] = np.clip(np.rint(rng.normal(0.0, PATCH / 5.0, size=(int(same.sum()), 4))), -lim, lim)


PATTERN = _make_pattern()  # columns: px, py, qx, qy


def _smoothed(img: np.ndarray) -> np.ndarray:
    return ndimage.gaussian_filter(img, 2.0, mode="nearest")


def describe(image, feature: OrientedFeature, _smooth: np.ndarray | None = None) -> np.ndarray:
    """256-bit rotated BRIEF descriptor packed into 32 uint8 bytes.

    Bit i is set when the smoothed image is darker at p_i than at q_i, with the
    test pattern rotated by the feature angle and sampled bilinearly.
    """
    img = _img(image)
    H, W = img.shape
    if not (HALF <= feature.x <= W - 1 - HALF and HALF <= feature.y <= H - 1 - HALF):
        raise RegistrationError("describe", f"feature at ({feature.x}, {feature.y}) closer than "
                                f"{HALF + 1} px to the border")
    sm = _smooth if _smooth is not None else _smoothed(img)
    c, s = math.cos(feature.angle), math.sin(feature.angle)
    px, py, qx, qy = PATTERN.T
    Ip = bilinear_sample(sm, feature.x + c * px - s * py, feature.y + s * px + c * py)
    Iq = bilinear_sample(sm, feature.x + c * qx - s * qy, feature.y + s * qx + c * qy)
    return np.packbits(Ip < Iq)


def describe_all(image, features) -> np.ndarray:
    img = _img(image)
    sm = _smoothed(img)
    if not features:
        return np.zeros((0, N_BITS // 8), np.uint8)
    return np.stack([describe(img, f, sm) for f in features])


_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(_POPCOUNT[np.bitwise_xor(np.asarray(a, np.uint8), np.asarray(b, np.uint8))].sum())


def hamming_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    x = np.bitwise_xor(A[:, None, :], B[None, :, :])
    return _POPCOUNT[x].sum(axis=2)


@dataclass(frozen=True)
class MatchSet:
    pairs: tuple[tuple[int, int, int], ...]  # (index A, index B, hamming distance)

    def __len__(self):
        return len(self.pairs)


def match_bruteforce(descs_a: np.ndarray, descs_b: np.ndarray, cross_check: bool = True) -> MatchSet:
    """Minimum-Hamming match for each A descriptor; ties go to the lowest B index."""
    if len(descs_a) == 0 or len(descs_b) == 0:
        raise RegistrationError("match", "empty descriptor list")
    D = hamming_matrix(np.asarray(descs_a), np.asarray(descs_b))
    best_b = np.argmin(D, axis=1)  # argmin returns the first minimum
    best_a = np.argmin(D, axis=0)
    pairs = [(i, int(j), int(D[i, j])) for i, j in enumerate(best_b) if not cross_check or best_a[j] == i]
    return MatchSet(tuple(pairs))


# ---------------------------------------------------------------------------
# homography


@dataclass(frozen=True)
class Homography:
    H: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.H, dtype=float)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ValueError("homography must be a finite 3x3 matrix")
        if abs(m[2, 2]) < 1e-15 or abs(np.linalg.det(m)) < 1e-15:
            raise DegenerateHomography("homography is singular")
        m = m / m[2, 2]
        m.flags.writeable = False
        object.__setattr__(self, "H", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=float)
        h = np.column_stack([p, np.ones(len(p))]) @ self.H.T
        return h[:, :2] / h[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.H))

    def compose(self, first: "Homography") -> "Homography":
        return Homography(self.H @ first.H)


def _normalizer(p: np.ndarray) -> np.ndarray:
    c = p.mean(axis=0)
    rms = math.sqrt(float(np.mean(np.sum((p - c) ** 2, axis=1))))
    if rms < 1e-12:
        raise DegenerateHomography("all points coincide")
    s = math.sqrt(2.0) / rms
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def dlt_homography(points_a, points_b) -> Homography:
    """Hartley-normalized DLT homography taking ``points_a`` onto ``points_b``."""
    a = np.asarray(points_a, dtype=float)
    b = np.asarray(points_b, dtype=float)
    if len(a) < 4 or len(a) != len(b):
        raise DegenerateHomography(f"need >= 4 paired points, got {len(a)} and {len(b)}")
    Ta, Tb = _normalizer(a), _normalizer(b)
    an = np.column_stack([a, np.ones(len(a))]) @ Ta.T
    bn = np.column_stack([b, np.ones(len(b))]) @ Tb.T
    rows = []
    for (x, y, w), (u, v, t) in zip(an, bn):
        rows.append([0, 0, 0, -t * x, -t * y, -t * w, v * x, v * y, v * w])
        rows.append([t * x, t * y, t * w, 0, 0, 0, -u * x, -u * y, -u * w])
    A = np.asarray(rows)
    _, s, Vt = np.linalg.svd(A)
    if s[7] <= 1e-10 * s[0]:
        raise DegenerateHomography("correspondences are degenerate (rank < 8)")
    Hn = Vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(Tb) @ Hn @ Ta)


def symmetric_transfer_error(H: Homography, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        fwd = np.linalg.norm(H.apply(a) - b, axis=1)
        back = np.linalg.norm(H.inverse().apply(b) - a, axis=1)
    err = np.sqrt(fwd ** 2 + back ** 2)
    return np.where(np.isfinite(err), err, np.inf)


def ransac_homography(points_a, points_b, threshold_px: float = 2.0, max_iters: int = 2000,
                      seed: int = 0, confidence: float = 0.99) -> tuple[Homography, np.ndarray]:
    """Best-consensus homography over random 4-point samples, refit on its inliers.

    Trial t draws its sample from ``default_rng([seed, t])`` so results do not
    depend on evaluation order. The trial count adapts to the best inlier ratio.
    """
    a = np.asarray(points_a, dtype=float)
    b = np.asarray(points_b, dtype=float)
    n = len(a)
    if n < 4:
        raise RegistrationError("ransac", f"need >= 4 matches, got {n}")
    best_mask = np.zeros(n, bool)
    best_err = np.inf
    needed = max_iters
    t = 0
    while t < min(needed, max_iters):
        idx = np.random.default_rng([seed, t]).choice(n, 4, replace=False)
        t += 1
        try:
            H = dlt_homography(a[idx], b[idx])
        except (DegenerateHomography, np.linalg.LinAlgError):
            continue
        err = symmetric_transfer_error(H, a, b)
        mask = err < threshold_px
        count = int(mask.sum())
        score = float(np.sum(err[mask]))
        if count > best_mask.sum() or (count == best_mask.sum() and count > 0 and score < best_err):
            best_mask, best_err = mask, score
            w = count / n
            if w >= 1.0:
                needed = t
            elif w > 0:
                needed = math.ceil(math.log(1 - confidence) / math.log(1 - w ** 4))
    if best_mask.sum() < 4:
        raise RegistrationError("ransac", f"no model with >= 4 inliers (best {int(best_mask.sum())})")
    H = dlt_homography(a[best_mask], b[best_mask])
    # one consensus update with the refitted model
    mask = symmetric_transfer_error(H, a, b) < threshold_px
    if mask.sum() >= best_mask.sum():
        H = dlt_homography(a[mask], b[mask])
        best_mask = mask
    return H, best_mask


# ---------------------------------------------------------------------------
# cube warping and the full chain


def warp_image_h(img: np.ndarray, H: Homography, out_shape: tuple[int, int]) -> np.ndarray:
    """Inverse-mapping bilinear resampling: output(H(p)) = img(p); 0 outside."""
    Hh, Wh = out_shape
    inv = np.linalg.inv(H.H)
    yy, xx = np.mgrid[0:Hh, 0:Wh].astype(float)
    den = inv[2, 0] * xx + inv[2, 1] * yy + inv[2, 2]
    sx = (inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]) / den
    sy = (inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]) / den
    return bilinear_sample(img, sx, sy)


def warp_cube(cube: SpectralCube, H: Homography, out_dims: tuple[int, int] | None = None) -> SpectralCube:
    dims = out_dims or cube.data.shape[1:]
    return SpectralCube(cube.bands, np.stack([warp_image_h(b, H, dims) for b in cube.data]))


@dataclass(frozen=True)
class RegisterParams:
    n_features: int = 500
    fast_threshold: float = 0.05
    cross_check: bool = True
    max_hamming: int = 64
    threshold_px: float = 2.0
    max_iters: int = 2000
    seed: int = 0


def register_label(cube: SpectralCube, reference_frame, params: RegisterParams | None = None
                   ) -> tuple[SpectralCube, Homography, dict]:
    """Warp ``cube`` into the reference frame's pixel grid.

    The cube side is reduced to luminance by the unweighted band mean. Returns the
    warped cube, the homography cube -> frame and diagnostics (feature counts,
    matches, inliers, mean reprojection error over inliers).
    """
    p = params or RegisterParams()
    ref = _img(reference_frame)
    lum = cube.data.mean(axis=0)
    if np.ptp(lum) > 0:
        lum = (lum - lum.min()) / np.ptp(lum)
    ref_n = (ref - ref.min()) / np.ptp(ref) if np.ptp(ref) > 0 else ref
    fa = detect_oriented_features(lum, p.n_features, p.fast_threshold)
    fb = detect_oriented_features(ref_n, p.n_features, p.fast_threshold)
    for name, feats in (("cube", fa), ("reference", fb)):
        if len(feats) < 20:
            raise RegistrationError("features", f"insufficient features in {name} view ({len(feats)} < 20)")
    da, db = describe_all(lum, fa), describe_all(ref_n, fb)
    matches = [m for m in match_bruteforce(da, db, p.cross_check).pairs if m[2] <= p.max_hamming]
    if len(matches) < 4:
        raise RegistrationError("match", f"only {len(matches)} matches within Hamming {p.max_hamming}")
    pa = np.array([[fa[i].x, fa[i].y] for i, _, _ in matches])
    pb = np.array([[fb[j].x, fb[j].y] for _, j, _ in matches])
    H, inliers = ransac_homography(pa, pb, p.threshold_px, p.max_iters, p.seed)
    reproj = np.linalg.norm(H.apply(pa[inliers]) - pb[inliers], axis=1)
    diag = {"features_cube": len(fa), "features_reference": len(fb), "matches": len(matches),
            "inliers": int(inliers.sum()), "reprojection_error_px": float(reproj.mean()),
            "H": H.H.tolist()}
    log.info("registered cube: %d/%d inliers, %.3f px", diag["inliers"], len(matches), diag["reprojection_error_px"])
    return warp_cube(cube, H, ref.shape), H, diag
