import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hexsim.core import Stack3D
from hexsim.metrology import (
    FitError, acf, axial_profile, count_maxima, fit_two_gaussians, fwhm_axial,
    fwhm_lateral, grating_contrast, masked_frame_ablation, maxima_positions, measure_resolution, mse,
    power_spectrum, ssim, ssim_2d, two_gaussians, z_profile, zero_pad_mid,
)
from hexsim.optics import render_gaussian
from hexsim.phantoms import PointCloud

K = 2 * np.sqrt(2 * np.log(2))
SP = (100.0, 100.0, 100.0)


def emitters(n, seed=1, shape=(64, 64, 64)):
    rng = np.random.default_rng(seed)
    pos = np.column_stack([rng.uniform(0, 6400, n), rng.uniform(0, 6400, n), rng.uniform(1600, 4800, n)])
    return Stack3D(render_gaussian(PointCloud.from_points(pos), shape, SP, (150.0, 150.0, 400.0)), SP)


@pytest.fixture(scope="module")
def sparse():
    return emitters(20)


def test_parseval():
    data = np.random.default_rng(0).random((4, 5, 6))
    P = power_spectrum(Stack3D(data, (1, 1, 1)))
    assert P.sum() == pytest.approx(data.size * np.sum(data ** 2))
    assert axial_profile(P).shape == (4,)


def test_zero_pad_layout():
    np.testing.assert_array_equal(zero_pad_mid(np.array([1.0, 2.0, 3.0, 4.0]), 2).values, [1, 2, 0, 0, 3, 4])
    np.testing.assert_array_equal(zero_pad_mid(np.array([1.0, 2.0, 3.0]), 1).values, [1, 2, 0, 3])
    assert len(zero_pad_mid(np.ones(10)).values) == 50
    with pytest.raises(ValueError):
        zero_pad_mid(np.ones(3), -1)


def test_effective_spacing():
    assert zero_pad_mid(np.ones(40), 160, spacing_nm=250.0).effective_spacing_nm == pytest.approx(50.0)


def test_zero_padding_interpolates_acf():
    x = np.random.default_rng(0).random(16)
    S = np.abs(np.fft.fft(x)) ** 2
    F0 = acf(zero_pad_mid(S, 0))
    F3 = acf(zero_pad_mid(S, 48))
    # zero padding keeps the zero-lag value up to the 1/length ifft scale
    assert F3.argmax() == len(F3) // 2 and F0.argmax() == len(F0) // 2
    assert F3.max() * 64 == pytest.approx(F0.max() * 16, rel=1e-9)


def test_acf_rejects_non_hermitian():
    S = np.array([1.0, 2.0, 0.5, 0.1, 3.0])
    with pytest.raises(ValueError, match="Hermitian"):
        acf(zero_pad_mid(S, 5))


def test_acf_ignores_unpaired_nyquist():
    S = np.array([4.0, 1.0, 7.0, 1.0])  # even length: index 2 has no partner
    F = acf(zero_pad_mid(S, 4))
    assert np.isfinite(F).all()


def test_fit_recovers_two_gaussians():
    x = np.arange(400.0)
    y = two_gaussians(x, 1.0, 6.0, 0.3, 40.0, 200.0)
    fit = fit_two_gaussians(y)
    assert fit.sigma_acf == pytest.approx(6.0, rel=1e-6)
    assert fit.sigma_ccf == pytest.approx(40.0, rel=1e-6)
    assert fit.mu == pytest.approx(200.0)
    assert fit.relative_residual < 1e-8


def test_single_gaussian_goes_to_acf_component():
    x = np.arange(300.0)
    fit = fit_two_gaussians(np.exp(-0.5 * ((x - 150) / 9.0) ** 2))
    assert fit.sigma_acf == pytest.approx(9.0, rel=1e-4)
    assert fit.alpha_acf > 0.99


def test_fit_failure_raises():
    x = np.arange(200.0)
    with pytest.raises(FitError) as info:
        fit_two_gaussians(two_gaussians(x, 1.0, 3.0, 0.5, 30.0, 90.0) + 0.01 * np.sin(x), max_nfev=2)
    assert info.value.fit is not None
    with pytest.raises(ValueError):
        fit_two_gaussians(np.zeros(10))


def test_single_emitter_fwhm_matches_gaussian_acf():
    s = Stack3D(render_gaussian(PointCloud.from_points([[3200, 3200, 3200]]), (64, 64, 64), SP,
                                (150.0, 150.0, 400.0)), SP)
    assert fwhm_axial(s).fwhm_nm == pytest.approx(np.sqrt(2) * K * 400, rel=0.01)
    for axis in ("x", "y"):
        res = fwhm_lateral(s, axis=axis)
        assert res.fwhm_nm == pytest.approx(np.sqrt(2) * K * 150, rel=0.01)
        assert res.psf_fwhm_nm == pytest.approx(K * 150, rel=0.01)


def test_scale_invariance(sparse):
    a = fwhm_axial(sparse).fwhm_nm
    b = fwhm_axial(sparse.with_data(37.0 * sparse.data)).fwhm_nm
    # the profile is rescaled before fitting; only optimizer round-off remains
    assert b == pytest.approx(a, rel=1e-6)


def test_padding_saturates(sparse):
    n = sparse.dims[2]
    values = [fwhm_axial(sparse, f * n).fwhm_nm for f in (4, 8)]
    assert values[1] == pytest.approx(values[0], rel=0.01)


def test_measure_resolution_report(sparse):
    rep = measure_resolution(sparse)
    assert rep.fwhm_lateral_nm == pytest.approx(0.5 * (rep.lateral_x.fwhm_nm + rep.lateral_y.fwhm_nm))
    for r in (rep.axial, rep.lateral_x, rep.lateral_y):
        assert r.fit.sigma_acf < r.fit.sigma_ccf


def test_mse_and_ssim_identity():
    rng = np.random.default_rng(0)
    a = Stack3D(rng.random((3, 20, 20)), (1, 1, 1))
    b = Stack3D(rng.random((3, 20, 20)), (1, 1, 1))
    assert mse(a, a) == 0.0
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, b) == pytest.approx(ssim(b, a))
    assert ssim(a, b) < 1.0
    with pytest.raises(ValueError):
        mse(a, Stack3D(np.zeros((3, 20, 21)), (1, 1, 1)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_bounded_and_decreasing(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((24, 24))
    noise = rng.standard_normal((24, 24))
    vals = [ssim_2d(x, np.clip(x + s * noise, 0, 1)) for s in (0.0, 0.05, 0.2, 0.5)]
    assert vals[0] == pytest.approx(1.0)
    assert all(-1 <= v <= 1 + 1e-12 for v in vals)
    assert vals[1] > vals[3]


def test_maxima():
    assert count_maxima(np.array([0, 1, 0, 2, 0.0])) == 2
    assert count_maxima(np.array([0, 1, 2, 3.0])) == 1
    np.testing.assert_array_equal(maxima_positions(np.array([3.0, 1, 2, 0])), [0, 2])


def test_z_profile_floor():
    data = np.zeros((3, 2, 2))
    data[1] = 1.0
    data[2] = 1e-4
    prof = z_profile(Stack3D(data, (1, 1, 1)))
    np.testing.assert_array_equal(prof, [0, 1, 0])


def test_grating_contrast_limits():
    z = np.arange(100) * 10.0
    sharp = np.exp(-0.5 * ((z[:, None] - np.array([300.0, 600.0])) / 10.0) ** 2).sum(axis=1)
    flat = np.ones(100)
    mk = lambda p: Stack3D(np.broadcast_to(p[:, None, None], (100, 2, 2)).copy(), (1, 1, 10))  # noqa: E731
    assert grating_contrast(mk(sharp), [300.0, 600.0]) > 0.99
    assert grating_contrast(mk(flat), [300.0, 600.0]) == 0.0
    with pytest.raises(ValueError):
        grating_contrast(mk(flat), [300.0])


def test_masked_frame_ablation_counts():
    rng = np.random.default_rng(0)
    inp = rng.random((7, 4, 4)) + 0.5

    def model(x):
        # output depends on every frame; a zeroed frame lowers the mean
        return np.broadcast_to(x.mean(axis=0), (3, 4, 4)).copy()

    ref = Stack3D(model(inp), (1, 1, 1))
    res = masked_frame_ablation(model, inp, ref)
    assert res.baseline[0] == 0.0 and res.baseline[1] == pytest.approx(1.0)
    assert len(res.masked) == 7
    assert res.n_masks_not_better() == 7


def test_zero_padding_is_exact_interpolation():
    # odd length: no Nyquist sample, so padding is an exact band-limited interpolation
    x = np.random.default_rng(3).random(15)
    S = np.abs(np.fft.fft(x)) ** 2
    F0 = acf(zero_pad_mid(S, 0))
    F4 = acf(zero_pad_mid(S, 45))
    c0, c4 = len(F0) // 2, len(F4) // 2
    m = np.arange(-7, 8)
    np.testing.assert_allclose(F4[c4 + 4 * m] * 60, F0[c0 + m] * 15, rtol=0, atol=1e-10 * F0.max() * 15)


def test_delta_spectrum_and_symmetric_acf():
    d = np.zeros((4, 4, 4))
    d[1, 2, 3] = 1.0
    P = power_spectrum(Stack3D(d, (1, 1, 1)))
    np.testing.assert_allclose(P, 1.0)
    F = acf(zero_pad_mid(axial_profile(power_spectrum(Stack3D(np.random.default_rng(0).random((9, 4, 4)),
                                                                        (1, 1, 1)))), 27))
    c = len(F) // 2
    np.testing.assert_allclose(F[c + 1:], F[c - 1:c - len(F[c + 1:]) - 1:-1], rtol=1e-10)


def test_isotropic_psf_axial_matches_lateral():
    rng = np.random.default_rng(4)
    pos = rng.uniform(1600, 4800, (10, 3))
    # mirror every emitter across the x = z plane so both axes see the same configuration
    pos = np.vstack([pos, pos[:, ::-1]])
    st_ = Stack3D(render_gaussian(PointCloud.from_points(pos), (64, 64, 64), SP, (200.0, 200.0, 200.0)), SP)
    ax, lat = fwhm_axial(st_).fwhm_nm, fwhm_lateral(st_, axis="x").fwhm_nm
    assert ax == pytest.approx(lat, rel=0.03)


def test_mse_constant_offset():
    a = Stack3D(np.random.default_rng(0).random((3, 4, 4)), (1, 1, 1))
    b = Stack3D(a.data + 0.1, (1, 1, 1))
    assert mse(a, b) == pytest.approx(0.01)


def test_masking_zero_frame_matches_baseline():
    rng = np.random.default_rng(1)
    inp = rng.random((7, 4, 4))
    inp[2] = 0.0

    def model(x):
        return np.broadcast_to(x.sum(axis=0), (3, 4, 4)).copy()

    res = masked_frame_ablation(model, inp, Stack3D(model(inp) + 0.05, (1, 1, 1)))
    assert res.masked[2] == res.baseline
