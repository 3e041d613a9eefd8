import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectrasweep.core import BandGrid, SpectralCube
from spectrasweep.losses import (PERFECT, LossWeights, RGBProjection, SsimParams, combined_loss, evaluate,
                                 grad_combined, l1_loss, psnr, rgb_project, ssim, ssim_grad, tv_grad, tv_loss)

EPS = 1e-8


def fd_check(f, g, x, rng, n=50, h=1e-5):
    worst = 0.0
    for _ in range(n):
        idx = tuple(int(rng.integers(0, s)) for s in x.shape)
        e = np.zeros_like(x)
        e[idx] = h
        fd = (f(x + e) - f(x - e)) / (2 * h)
        worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6))
    return worst


# --- L1 ---------------------------------------------------------------------------

def test_l1_basics(rng):
    y = rng.random((3, 5, 5))
    assert l1_loss(y, y) == 0
    assert l1_loss(y, y + 0.1) == pytest.approx(0.1, abs=1e-15)


def test_l1_matches_loop(rng):
    y, z = rng.random((2, 2, 4, 3))
    total = 0.0
    for l in range(2):
        for i in range(4):
            for j in range(3):
                total += abs(y[l, i, j] - z[l, i, j])
    assert l1_loss(y, z) == pytest.approx(total / 24, abs=1e-15)


def test_l1_shape_mismatch():
    with pytest.raises(ValueError):
        l1_loss(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


# --- TV ---------------------------------------------------------------------------

def test_tv_constant():
    assert tv_loss(np.full((3, 6, 6), 0.4)) <= EPS


def test_tv_single_spatial_step():
    x = np.array([[[0.0, 1.0]]])  # L=1, H=1, W=2
    assert tv_loss(x, 0.2, EPS) == pytest.approx(math.sqrt(1 + EPS ** 2) / 2, abs=1e-9)


def test_tv_single_spectral_step():
    x = np.array([[[0.0]], [[1.0]]])  # L=2, H=1, W=1
    assert tv_loss(x, 0.2, EPS) == pytest.approx(math.sqrt(0.2) / 2, abs=1e-9)


def test_tv_axes():
    # horizontal differences run along W, vertical along H
    x = np.zeros((1, 2, 2))
    x[0, :, 1] = 1.0
    assert tv_loss(x, 0.0, 0.0) == pytest.approx(2 / 4)
    y = np.zeros((1, 2, 2))
    y[0, 1, :] = 1.0
    assert tv_loss(y, 0.0, 0.0) == pytest.approx(2 / 4)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 10.0), st.integers(0, 1000))
def test_tv_positively_homogeneous(alpha, seed):
    x = np.random.default_rng(seed).random((3, 6, 5))
    assert tv_loss(alpha * x) == pytest.approx(alpha * tv_loss(x), abs=1e-6)


def test_tv_translation_of_periodic_pattern():
    # a pattern with period 4 tiled so both crops see one full period of differences
    base = np.random.default_rng(5).random((2, 4, 4))
    tiled = np.tile(base, (1, 4, 4))
    a = tiled[:, 0:9, 0:9]
    b = tiled[:, 4:13, 4:13]  # shifted by exactly one period
    assert tv_loss(a) == tv_loss(b)


def test_tv_gradient_fd(rng):
    x = rng.random((4, 8, 8))
    assert fd_check(lambda v: tv_loss(v), tv_grad(x), x, rng) <= 1e-5


# --- RGB and SSIM -------------------------------------------------------------------

def test_default_projection_rows():
    P = RGBProjection.default(BandGrid.uniform(50))
    assert np.allclose(P.matrix.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(P.matrix >= 0)
    nir = BandGrid.uniform(50).array > 780
    assert np.all(P.matrix[:, nir] == 0)


def test_rgb_identity_like():
    x = np.random.default_rng(0).random((3, 5, 5))
    assert np.array_equal(rgb_project(x, RGBProjection(np.eye(3))), x)


def test_rgb_uniform():
    P = RGBProjection.default(BandGrid.uniform(8))
    out = rgb_project(np.full((8, 4, 4), 0.3), P)
    assert np.allclose(out, 0.3, atol=1e-15)


def test_rgb_matches_loop(rng):
    P = RGBProjection.default(BandGrid.uniform(6))
    x = rng.random((6, 3, 4))
    out = rgb_project(x, P)
    ref = np.zeros((3, 3, 4))
    for c in range(3):
        for i in range(3):
            for j in range(4):
                for l in range(6):
                    ref[c, i, j] += P.matrix[c, l] * x[l, i, j]
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_rgb_width_mismatch():
    with pytest.raises(ValueError):
        rgb_project(np.zeros((5, 4, 4)), RGBProjection.default(BandGrid.uniform(8)))


def naive_ssim(a, b, p=SsimParams()):
    w = p.window()
    C1, C2 = (p.k1 * p.dynamic_range) ** 2, (p.k2 * p.dynamic_range) ** 2
    vals = []
    for c in range(a.shape[0]):
        for i in range(a.shape[1] - 10):
            for j in range(a.shape[2] - 10):
                pa, pb = a[c, i:i + 11, j:j + 11], b[c, i:i + 11, j:j + 11]
                ma, mb = np.sum(w * pa), np.sum(w * pb)
                va = np.sum(w * (pa - ma) ** 2)
                vb = np.sum(w * (pb - mb) ** 2)
                cov = np.sum(w * (pa - ma) * (pb - mb))
                vals.append((2 * ma * mb + C1) * (2 * cov + C2) / ((ma ** 2 + mb ** 2 + C1) * (va + vb + C2)))
    return float(np.mean(vals))


def test_ssim_identity(rng):
    x = rng.random((3, 16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)


def test_ssim_checkerboard_negative():
    board = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)
    a = np.stack([board] * 3)
    s = ssim(a, 1 - a)
    assert s < 0
    assert s == pytest.approx(naive_ssim(a, 1 - a), abs=1e-9)


def test_ssim_matches_naive(rng):
    a, b = rng.random((2, 2, 14, 13))
    assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(seed):
    a, b = np.random.default_rng(seed).random((2, 3, 12, 12))
    assert ssim(a, b) == ssim(b, a)
    assert -1 <= ssim(a, b) <= 1


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)))


def test_ssim_gradient_fd(rng):
    a, b = rng.random((2, 3, 14, 14))
    assert fd_check(lambda v: ssim(a, v), ssim_grad(a, b), b, rng) <= 1e-5


# --- combined -----------------------------------------------------------------------

@pytest.fixture
def pair(rng):
    return rng.random((4, 16, 16)), rng.random((4, 16, 16))


def test_combined_constant_zero():
    c = np.full((4, 16, 16), 0.25)
    assert combined_loss(c, c) <= 1e-6


def test_combined_zero_weights_is_l1(pair):
    y, z = pair
    w = LossWeights(0.0, 0.2, 0.0)
    assert combined_loss(y, z, w) == l1_loss(y, z)
    assert np.array_equal(grad_combined(y, z, w), np.sign(z - y) / y.size)


def test_combined_is_sum_of_terms(pair):
    y, z = pair
    P = RGBProjection.default(BandGrid.uniform(4))
    expected = l1_loss(y, z) + 0.1 * tv_loss(z, 0.2) + 0.9 * (1 - ssim(rgb_project(y, P), rgb_project(z, P)))
    assert combined_loss(y, z, LossWeights(), P) == pytest.approx(expected, abs=1e-12)


def test_combined_tv_on_residual(pair):
    y, z = pair
    w = LossWeights(0.1, 0.2, 0.0, tv_on_residual=True)
    assert combined_loss(y, z, w) == pytest.approx(l1_loss(y, z) + 0.1 * tv_loss(y - z, 0.2), abs=1e-12)


@pytest.mark.parametrize("residual", [False, True])
def test_grad_combined_fd(residual):
    rng = np.random.default_rng(17)
    y, z = rng.random((2, 4, 8, 8))
    # the RGB SSIM window needs 11 px, so use 12x12 for the full objective
    y, z = rng.random((2, 4, 12, 12))
    w = LossWeights(tv_on_residual=residual)
    g = grad_combined(y, z, w)
    assert fd_check(lambda v: combined_loss(y, v, w), g, z, rng) <= 1e-5


def test_grad_combined_at_minimum_of_quadratic_term():
    # with all weights off the L1 term's subgradient at y = yhat is exactly zero
    y = np.random.default_rng(2).random((4, 12, 12))
    assert np.linalg.norm(grad_combined(y, y.copy(), LossWeights(0.0, 0.2, 0.0))) < 1e-8


def test_grad_combined_linear_in_weights(pair):
    y, z = pair
    full = grad_combined(y, z, LossWeights(0.1, 0.2, 0.9))
    parts = (grad_combined(y, z, LossWeights(0.0, 0.2, 0.0))
             + (grad_combined(y, z, LossWeights(0.1, 0.2, 0.0)) - grad_combined(y, z, LossWeights(0.0, 0.2, 0.0)))
             + (grad_combined(y, z, LossWeights(0.0, 0.2, 0.9)) - grad_combined(y, z, LossWeights(0.0, 0.2, 0.0))))
    assert np.allclose(full, parts, atol=1e-15)


# --- PSNR and evaluation --------------------------------------------------------------

def test_psnr_offset_is_20db():
    y = np.full((2, 8, 8), 0.5)
    assert psnr(y, y + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_perfect():
    y = np.random.default_rng(1).random((2, 8, 8))
    assert psnr(y, y) == PERFECT


def test_psnr_matches_loop(rng):
    y, z = rng.random((2, 2, 5, 5))
    mse = sum((y[l, i, j] - z[l, i, j]) ** 2 for l in range(2) for i in range(5) for j in range(5)) / 50
    assert psnr(y, z) == pytest.approx(10 * math.log10(1 / mse), abs=1e-9)


def test_psnr_decreases_with_noise():
    y = np.full((4, 32, 32), 0.5)
    vals = [psnr(y, y + np.random.default_rng(s).normal(0, sigma, y.shape))
            for s, sigma in enumerate([0.01, 0.02, 0.05, 0.1, 0.2])]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def cube(data):
    return SpectralCube(BandGrid.uniform(data.shape[0]), data)


def test_evaluate_perfect_pair(rng):
    t = cube(rng.random((8, 16, 16)))
    rep = evaluate([t], [t])
    assert rep.pairs[0]["l1"] == 0 and rep.pairs[0]["ssim"] == pytest.approx(1.0, abs=1e-9)
    assert set(rep.aggregates) == {"Best", "Worst", "Mean"}
    assert rep.to_json()["pairs"][0]["psnr_db"] == "perfect"


def test_evaluate_two_pairs_mean(rng):
    t1, t2 = cube(rng.random((8, 16, 16))), cube(rng.random((8, 16, 16)))
    p1 = cube(np.clip(t1.data + 0.05, 0, None))
    p2 = cube(np.clip(t2.data + 0.1, 0, None))
    rep = evaluate([p1, p2], [t1, t2])
    for m in ("psnr_db", "ssim", "l1"):
        assert rep.aggregates["Mean"][m] == pytest.approx((rep.pairs[0][m] + rep.pairs[1][m]) / 2)
    assert rep.aggregates["Best"]["l1"] == min(p["l1"] for p in rep.pairs)
    assert rep.aggregates["Worst"]["psnr_db"] == min(p["psnr_db"] for p in rep.pairs)
    assert "Best" in rep.table().splitlines()[0]


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate([], [])
