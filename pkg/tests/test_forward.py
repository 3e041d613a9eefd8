import numpy as np
import pytest

from spectrasweep.core import BandGrid, SpectralCube
from spectrasweep.forward import (NoiseModel, SensorResponse, apply_noise, blur, blur_adjoint,
                                  frame_kernels, render_frame, simulate_frame, simulate_stack)
from spectrasweep.optics import FocusSchedule, defocus_radius_px, image_distance, psf_kernel
from spectrasweep.preprocess import sobel_edges


def dense_blur_oracle(img, k):
    """Direct tap-by-tap sum with clamped (replicate) indices."""
    H, W = img.shape
    R = k.shape[0] // 2
    rows, cols = np.arange(H), np.arange(W)
    out = np.zeros_like(img, dtype=float)
    for a in range(-R, R + 1):
        ri = np.clip(rows + a, 0, H - 1)
        for b in range(-R, R + 1):
            out += k[a + R, b + R] * img[np.ix_(ri, np.clip(cols + b, 0, W - 1))]
    return out


@pytest.mark.parametrize("r", [1.0, 2.6, 8.3])
def test_blur_matches_dense_oracle(r, rng):
    img = rng.random((20, 23))
    k = psf_kernel(r)
    assert np.max(np.abs(blur(img, k) - dense_blur_oracle(img, k))) <= 1e-12


@pytest.mark.parametrize("r", [0.0, 1.3, 3.7, 9.5])
def test_blur_adjoint_identity(r, rng):
    k = psf_kernel(r)
    x, y = rng.standard_normal((2, 24, 19))
    assert np.vdot(blur(x, k), y) == pytest.approx(np.vdot(x, blur_adjoint(y, k)), rel=1e-12, abs=1e-12)


def test_single_band_in_focus_is_identity(toy, rng):
    lens, geom, _, _ = toy
    band = rng.random((64, 64))
    band /= band.max()
    cube = SpectralCube(BandGrid((600.0,)), band[None])
    z = image_distance(lens, geom.u_mm, 600.0)
    frame = simulate_frame(cube, lens, geom, z, z_ref_mm=z)
    assert np.max(np.abs(frame.data - band)) <= 1e-6


def test_uniform_cube_gives_uniform_frame(toy):
    lens, geom, bands, sched = toy
    cube = SpectralCube(bands, np.full((8, 64, 64), 0.37))
    for z in sched.positions_mm:
        raw = render_frame(cube.data, frame_kernels(bands.wavelengths_nm, lens, geom, z),
                           SensorResponse.flat(8).array)
        assert np.ptp(raw[10:-10, 10:-10]) <= 1e-9
        assert raw[32, 32] == pytest.approx(0.37, abs=1e-9)


def test_point_source_disc(toy):
    lens, geom, _, sched = toy
    cube_data = np.zeros((1, 64, 64))
    cube_data[0, 32, 32] = 1.0
    cube = SpectralCube(BandGrid((900.0,)), cube_data)
    z = sched.positions_mm[-1]  # focuses 470 nm, so 900 nm is far out of focus
    r = defocus_radius_px(lens, geom, 900.0, z)
    assert r > 10
    frame = simulate_frame(cube, lens, geom, z, gain=1.0)
    expected = dense_blur_oracle(cube_data[0], psf_kernel(r))
    assert np.max(np.abs(frame.data - expected)) <= 1e-9
    support = np.argwhere(frame.data > 1e-12)
    extent = np.max(np.abs(support - 32))
    assert extent == int(np.ceil(r))


def test_energy_conservation(toy, toy_scene):
    lens, geom, bands, sched = toy
    data = np.zeros_like(toy_scene.data)
    data[:, 29:35, 29:35] = toy_scene.data[:, 26:32, 26:32]  # farther from borders than any blur radius
    w = np.linspace(0.5, 1.5, 8)
    for z in sched.positions_mm:
        raw = render_frame(data, frame_kernels(bands.wavelengths_nm, lens, geom, z), w)
        expected = float(np.sum(w * data.mean(axis=(1, 2))))
        assert raw.mean() == pytest.approx(expected, abs=1e-6)


def test_linearity(toy, rng):
    lens, geom, bands, sched = toy
    x, y = rng.random((2, 8, 64, 64))
    a, b = 0.7, -1.9
    w = SensorResponse.flat(8).array
    for z in sched.positions_mm[::3]:
        ks = frame_kernels(bands.wavelengths_nm, lens, geom, z)
        lhs = render_frame(a * x + b * y, ks, w)
        rhs = a * render_frame(x, ks, w) + b * render_frame(y, ks, w)
        assert np.max(np.abs(lhs - rhs)) <= 1e-9


def test_defocus_lowers_total_variation(toy):
    lens, geom, bands, sched = toy
    data = np.zeros((8, 64, 64))
    band = 0  # 470 nm focuses at the last position
    data[band, 32, 32] = 1.0
    cube = SpectralCube(bands, data)
    tvs = []
    for z in sched.positions_mm:
        f = simulate_frame(cube, lens, geom, z, gain=1.0).data
        tvs.append(np.abs(np.diff(f, axis=0)).sum() + np.abs(np.diff(f, axis=1)).sum())
    # distance from focus grows as we move toward the first position
    assert np.all(np.diff(tvs) > 0)


def test_stack_k1_equals_frame(toy, toy_scene):
    lens, geom, bands, sched = toy
    z = sched.positions_mm[2]
    one = FocusSchedule(sched.z0_mm, sched.lambda0_nm, (z,))
    noise = NoiseModel("gaussian", sigma=0.01, seed=5)
    stack = simulate_stack(toy_scene, lens, geom, one, noise=noise)
    frame = simulate_frame(toy_scene, lens, geom, z, noise=noise)
    assert np.array_equal(stack.frames[0].data, frame.data)


def test_stack_deterministic(toy, toy_scene):
    lens, geom, _, sched = toy
    noise = NoiseModel("poisson-gaussian", sigma=0.01, photon_scale=500, seed=11)
    s1 = simulate_stack(toy_scene, lens, geom, sched, noise=noise)
    s2 = simulate_stack(toy_scene, lens, geom, sched, noise=noise)
    assert s1.as_array().tobytes() == s2.as_array().tobytes()
    s3 = simulate_stack(toy_scene, lens, geom, sched, noise=NoiseModel("poisson-gaussian", 0.01, 500, seed=12))
    assert not np.array_equal(s1.as_array(), s3.as_array())


def test_each_frame_sharpest_at_its_band(toy):
    lens, geom, bands, sched = toy
    # one textured band at a time: frame whose position focuses that band has the most edge energy
    rng = np.random.default_rng(7)
    tex = (rng.random((16, 16)) > 0.5).astype(float).repeat(4, 0).repeat(4, 1)
    focus_order = sorted(range(8), key=lambda b: -bands.wavelengths_nm[b])  # position k -> band
    for k, b in enumerate(focus_order):
        data = np.zeros((8, 64, 64))
        data[b] = tex
        stack = simulate_stack(SpectralCube(bands, data), lens, geom, sched)
        energy = [np.sum(sobel_edges(f) ** 2) for f in stack.frames]
        assert int(np.argmax(energy)) == k


def test_stack_normalized_by_global_max(toy, toy_scene):
    lens, geom, _, sched = toy
    s = simulate_stack(toy_scene, lens, geom, sched)
    assert s.as_array().max() == pytest.approx(1.0, abs=1e-15)
    assert s.gain > 0


def test_band_outside_range(toy):
    lens, geom, _, sched = toy
    cube = SpectralCube(BandGrid((300.0,)), np.zeros((1, 16, 16)))
    with pytest.raises(ValueError, match="300.000 nm"):
        simulate_frame(cube, lens, geom, sched.positions_mm[0])


def test_noise_none_identity(rng):
    img = rng.random((16, 16))
    assert np.array_equal(apply_noise(img, NoiseModel()).data, img)


def test_noise_seeded():
    img = np.full((16, 16), 0.5)
    n = NoiseModel("gaussian", sigma=0.05, seed=3)
    assert np.array_equal(apply_noise(img, n).data, apply_noise(img, n).data)


def test_poisson_mean_unbiased():
    # photon-limited path only (sigma = 0); Poisson(0.5 * s) / s has std sqrt(0.5 / s)
    s = 200.0
    n_real = 10_000
    img = np.full((100, 100), 0.5)  # 10^4 independent realizations of one 0.5 pixel
    out = apply_noise(img, NoiseModel("poisson-gaussian", sigma=0.0, photon_scale=s, seed=9)).data
    sd = np.sqrt(0.5 / s)
    assert abs(out.mean() - 0.5) <= 3 * sd / np.sqrt(n_real)
