import numpy as np
import pytest

from hexsim.classical import ReconParams, band_separate, mix_bands, reconstruct_plane, reconstruct_stack
from hexsim.core import RawSimStack
from hexsim.optics import IlluminationSpec, MicroscopeConfig, simulate_raw_sim
from hexsim.phantoms import PointCloud

CFG = MicroscopeConfig(camera_px=32, z_planes=40)
SPEC = IlluminationSpec.for_microscope(CFG)
PARAMS = ReconParams.from_setup(CFG, SPEC)
PAIR = {0: 0, 1: 2, 2: 1, 3: 4, 4: 3, 5: 6, 6: 5}  # band j <-> band with the opposite carrier


def known_bands(rng, n=32):
    """Band images with b[-q] = conj(b[q]) so the mixed frames are real."""
    b = np.empty((7, n, n), dtype=np.complex128)
    b[0] = rng.random((n, n))
    for j in (1, 3, 5):
        b[j] = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        b[PAIR[j]] = b[j].conj()
    return b


def test_band_round_trip():
    rng = np.random.default_rng(0)
    b = known_bands(rng)
    frames = np.einsum("tj,jyx->tyx", PARAMS.mixing, b)
    assert np.abs(frames.imag).max() < 1e-12
    got = band_separate(frames.real, PARAMS)
    want = np.fft.fft2(b)
    assert np.linalg.norm(got - want) / np.linalg.norm(want) < 1e-10


def test_mix_inverts_separate():
    frames = np.random.default_rng(1).random((7, 16, 16))
    back = np.fft.ifft2(mix_bands(band_separate(frames, PARAMS), PARAMS))
    np.testing.assert_allclose(back.real, frames, atol=1e-12)
    assert np.abs(back.imag).max() < 1e-12


def test_band_separate_wrong_count():
    with pytest.raises(ValueError, match="7 frames"):
        band_separate(np.zeros((6, 8, 8)), PARAMS)


def test_recon_params_validation():
    with pytest.raises(ValueError):
        ReconParams.from_setup(CFG, SPEC, wiener_w=0.0)
    with pytest.raises(ValueError):
        ReconParams.from_setup(CFG, SPEC, apodization="cosine")


def test_reconstruct_linear():
    rng = np.random.default_rng(2)
    a, b = rng.random((2, 7, 16, 16))
    lhs = reconstruct_plane(2.0 * a - 3.0 * b, PARAMS)
    rhs = 2.0 * reconstruct_plane(a, PARAMS) - 3.0 * reconstruct_plane(b, PARAMS)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * np.abs(rhs).max())


def test_spectrum_inside_extended_support():
    raw = simulate_raw_sim(PointCloud.from_points([CFG.center()]), CFG, SPEC)
    plane = reconstruct_plane(raw.frames[20], PARAMS)
    assert plane.shape == (64, 64)
    k = 2 * np.pi * np.fft.fftfreq(64, CFG.pitch_nm / 2)
    kr = np.hypot(*np.meshgrid(k, k))
    spec = np.abs(np.fft.fft2(plane))
    assert spec[kr >= PARAMS.k_max].max() < 1e-10 * spec.max()
    # content beyond the widefield cutoff is recovered
    assert spec[(kr > CFG.k_cut * 1.1) & (kr < PARAMS.k_max * 0.8)].max() > 1e-3 * spec.max()


def test_stack_dims_and_spacing():
    cfg = MicroscopeConfig(camera_px=16, z_planes=40)
    spec = IlluminationSpec.for_microscope(cfg)
    raw = simulate_raw_sim(PointCloud.from_points([cfg.center()]), cfg, spec)
    out = reconstruct_stack(raw, ReconParams.from_setup(cfg, spec))
    assert out.data.shape == (120, 32, 32)
    assert out.spacing == pytest.approx((cfg.pitch_nm / 2, cfg.pitch_nm / 2, 250.0 / 3))


def test_constant_in_z_stays_constant():
    frames = np.broadcast_to(np.random.default_rng(3).random((1, 7, 16, 16)), (5, 7, 16, 16)).copy()
    out = reconstruct_stack(RawSimStack(frames, CFG.pitch_nm, 250.0), PARAMS).data
    assert out.shape[0] == 15
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-10 * np.abs(out).max())


def test_single_plane_stack():
    out = reconstruct_stack(RawSimStack(np.ones((1, 7, 8, 8)), CFG.pitch_nm, 250.0), PARAMS)
    assert out.data.shape == (3, 16, 16)
