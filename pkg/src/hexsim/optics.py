"""Microscope forward models: PSF, hexagonal illumination, raw SIM, widefield,
high-resolution confocal targets and Poisson shot noise.

Coordinates are in nm. Pixel ``i`` of a frame is centred at ``i * pitch``;
plane ``k`` of a stack sits at ``k * dz``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FRAMES_PER_PLANE, OUT_FRAMES_PER_PLANE, RawSimStack, Stack3D
from .phantoms import PointCloud

FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))
# beyond this many sigma a Gaussian weight is below 1e-8 and is skipped
_CUTOFF_SIGMAS = 6.0


@dataclass(frozen=True)
class MicroscopeConfig:
    camera_px: int = 256
    pixel_pitch_um: float = 6.5
    magnification: float = 60.0
    NA: float = 1.1
    wavelength_nm: float = 525.0
    refractive_index: float = 1.33
    z_planes: int = 40
    dz_nm: float = 250.0
    sheet_fwhm_nm: float = 600.0

    def __post_init__(self):
        for name in ("camera_px", "pixel_pitch_um", "magnification", "NA", "wavelength_nm",
                     "refractive_index", "z_planes", "dz_nm", "sheet_fwhm_nm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.NA >= self.refractive_index:
            raise ValueError("NA must be smaller than the refractive index")

    @property
    def pitch_nm(self) -> float:
        """Sample-plane pixel pitch."""
        return self.pixel_pitch_um * 1000.0 / self.magnification

    @property
    def field_nm(self) -> float:
        return self.camera_px * self.pitch_nm

    @property
    def depth_nm(self) -> float:
        return self.z_planes * self.dz_nm

    @property
    def k_cut(self) -> float:
        """Incoherent detection cutoff in rad/nm."""
        return 4.0 * np.pi * self.NA / self.wavelength_nm

    def center(self) -> np.ndarray:
        """Middle of the sampled volume, in the pixel-centre convention."""
        return np.array([(self.camera_px - 1) * self.pitch_nm / 2,
                         (self.camera_px - 1) * self.pitch_nm / 2,
                         (self.z_planes - 1) * self.dz_nm / 2])

    def psf(self, wavelength_nm=None) -> PsfModel:
        lam = self.wavelength_nm if wavelength_nm is None else wavelength_nm
        sheet = self.sheet_fwhm_nm * lam / self.wavelength_nm
        return PsfModel(
            sigma_lat=0.21 * lam / self.NA,
            sigma_ax=0.89 * self.refractive_index * lam / self.NA ** 2,
            sigma_sheet=sheet / FWHM_PER_SIGMA,
        )


@dataclass(frozen=True)
class PsfModel:
    """Separable Gaussian system PSF.

    The axial response of the light-sheet system is the sheet profile
    convolved with the detection axial PSF, so the two widths add in
    quadrature (``sigma_z``).
    """

    sigma_lat: float
    sigma_ax: float
    sigma_sheet: float = 0.0

    @property
    def sigma_z(self) -> float:
        return float(np.hypot(self.sigma_ax, self.sigma_sheet))

    def otf(self, kx, ky) -> np.ndarray:
        """Lateral OTF (unit DC gain), wavevectors in rad/nm."""
        return np.exp(-0.5 * self.sigma_lat ** 2 * (kx ** 2 + ky ** 2))

    def squared(self) -> PsfModel:
        """The PSF whose profile is this one squared: every width shrinks by sqrt(2)."""
        r = np.sqrt(2.0)
        return PsfModel(self.sigma_lat / r, self.sigma_ax / r, self.sigma_sheet / r)


@dataclass(frozen=True)
class IlluminationSpec:
    """Three coherent beams at 120 degrees giving a hexagonal pattern.

    Carriers are the pairwise beam differences. ``carriers[j]`` is the
    in-plane wavevector of band ``j`` (band 0 is DC); ``amplitudes[j]`` its
    weight in the mean-1 pattern. The frame ``t`` pattern is displaced by
    ``t * d0`` with ``d0`` chosen so the carriers ``a-b`` and ``b-c`` advance by
    2pi/7 and 4pi/7 per frame.
    """

    carrier_nm_inv: float
    angle: float = 0.0
    beam_wavevectors: np.ndarray = field(init=False, repr=False)
    carriers: np.ndarray = field(init=False, repr=False)
    amplitudes: np.ndarray = field(init=False, repr=False)
    step: np.ndarray = field(init=False, repr=False)
    phase_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = self.carrier_nm_inv / np.sqrt(3.0)
        ang = self.angle + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
        beams = p * np.column_stack([np.cos(ang), np.sin(ang)])
        a, b, c = beams
        q_ab, q_bc, q_ca = a - b, b - c, c - a
        carriers = np.array([[0.0, 0.0], q_ab, -q_ab, q_bc, -q_bc, q_ca, -q_ca])
        d0 = np.linalg.solve(np.array([q_ab, q_bc]), np.array([2.0, 4.0]) * np.pi / FRAMES_PER_PLANE)
        n = np.rint(carriers @ d0 / (2 * np.pi / FRAMES_PER_PLANE)).astype(int) % FRAMES_PER_PLANE
        amps = np.array([1.0] + [1.0 / 3.0] * 6)
        for name, val in (("beam_wavevectors", beams), ("carriers", carriers), ("amplitudes", amps),
                          ("step", d0), ("phase_index", n)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def for_microscope(cls, cfg: MicroscopeConfig, beta=0.9, angle=0.0) -> IlluminationSpec:
        return cls(beta * cfg.k_cut, angle)

    def shift(self, t) -> np.ndarray:
        return t * self.step

    def mixing_matrix(self) -> np.ndarray:
        """``M[t, j]`` with ``frame_t = sum_j M[t, j] * band_j``."""
        t = np.arange(FRAMES_PER_PLANE)[:, None]
        return np.exp(-2j * np.pi * t * self.phase_index[None, :] / FRAMES_PER_PLANE)


def pattern_intensity(spec: IlluminationSpec, t, x, y) -> np.ndarray:
    """Hexagonal pattern ``|sum_m exp(i p_m . (r - d_t))|^2 / 3`` (mean 1)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = spec.shift(t)
    field_ = np.zeros(np.broadcast(x, y).shape, dtype=np.complex128)
    for px, py in spec.beam_wavevectors:
        field_ += np.exp(1j * (px * (x - dx) + py * (y - dy)))
    return np.abs(field_) ** 2 / 3.0


def _axis_weights(coords, n, step, sigma):
    """Unit-area Gaussian weights of each emitter on a 1D pixel grid, shape (n_emitters, n)."""
    d = np.arange(n)[None, :] * step - coords[:, None]
    return np.exp(-0.5 * (d / sigma) ** 2) * step / (np.sqrt(2 * np.pi) * sigma)


def render_gaussian(cloud: PointCloud, shape, spacing, sigma, weights=None) -> np.ndarray:
    """Sum of separable Gaussians, one per emitter.

    ``shape`` is ``(nz, ny, nx)``, ``spacing`` ``(dx, dy, dz)`` and ``sigma``
    ``(sx, sy, sz)`` in nm. Laterally each Gaussian has unit area (so a frame
    sums to the emitter intensity); axially it has unit peak. ``weights`` is an
    optional ``(k, n_emitters)`` array of extra per-emitter factors, giving
    ``k`` output volumes.
    """
    nz, ny, nx = shape
    dx, dy, dz = spacing
    sx, sy, sz = sigma
    if weights is None:
        weights = np.ones((1, len(cloud)))
        squeeze = True
    else:
        weights = np.atleast_2d(weights)
        squeeze = False
    out = np.zeros((weights.shape[0], nz, ny, nx))
    if len(cloud) == 0:
        return out[0] if squeeze else out
    pos = cloud.positions
    amp = cloud.intensities
    gx = _axis_weights(pos[:, 0], nx, dx, sx)
    gy = _axis_weights(pos[:, 1], ny, dy, sy)
    z_grid = np.arange(nz) * dz
    for k in range(nz):
        dzk = z_grid[k] - pos[:, 2]
        near = np.abs(dzk) < _CUTOFF_SIGMAS * sz
        if not near.any():
            continue
        wz = amp[near] * np.exp(-0.5 * (dzk[near] / sz) ** 2)
        gyk = gy[near]
        gxk = gx[near]
        for m in range(weights.shape[0]):
            out[m, k] = (gyk * (wz * weights[m, near])[:, None]).T @ gxk
    return out[0] if squeeze else out


def simulate_raw_sim(cloud: PointCloud, cfg: MicroscopeConfig, spec: IlluminationSpec) -> RawSimStack:
    """Render the 7 phase-stepped frames of every plane."""
    psf = cfg.psf()
    n = cfg.camera_px
    if len(cloud):
        pattern = np.stack([pattern_intensity(spec, t, cloud.positions[:, 0], cloud.positions[:, 1])
                            for t in range(FRAMES_PER_PLANE)])
    else:
        pattern = np.zeros((FRAMES_PER_PLANE, 0))
    vols = render_gaussian(cloud, (cfg.z_planes, n, n), (cfg.pitch_nm, cfg.pitch_nm, cfg.dz_nm),
                           (psf.sigma_lat, psf.sigma_lat, psf.sigma_z), weights=pattern)
    return RawSimStack(np.moveaxis(vols, 0, 1), cfg.pitch_nm, cfg.dz_nm)


def simulate_widefield(cloud: PointCloud, cfg: MicroscopeConfig) -> Stack3D:
    """Uniform-illumination counterpart of :func:`simulate_raw_sim`, one frame per plane."""
    psf = cfg.psf()
    n = cfg.camera_px
    spacing = (cfg.pitch_nm, cfg.pitch_nm, cfg.dz_nm)
    data = render_gaussian(cloud, (cfg.z_planes, n, n), spacing, (psf.sigma_lat, psf.sigma_lat, psf.sigma_z))
    return Stack3D(data, spacing)


def simulate_confocal_hr(cloud: PointCloud, cfg: MicroscopeConfig) -> Stack3D:
    """High-resolution target: squared system PSF at wavelength / sqrt(2).

    Sampled at half the lateral pitch and a third of the plane spacing, so
    40 planes become 120 and a 256 px frame becomes 512 px. For the Gaussian
    model every PSF width is exactly half the widefield one.
    """
    psf = cfg.psf(cfg.wavelength_nm / np.sqrt(2.0)).squared()
    n = 2 * cfg.camera_px
    nz = OUT_FRAMES_PER_PLANE * cfg.z_planes
    spacing = (cfg.pitch_nm / 2, cfg.pitch_nm / 2, cfg.dz_nm / OUT_FRAMES_PER_PLANE)
    data = render_gaussian(cloud, (nz, n, n), spacing, (psf.sigma_lat, psf.sigma_lat, psf.sigma_z))
    return Stack3D(data, spacing)


@dataclass(frozen=True)
class NoiseSpec:
    """Expected photons collected from one unit-intensity, in-focus emitter
    across the 7 frames of its SIM image."""

    photons_per_emitter: float
    seed: int = 0

    def __post_init__(self):
        if self.photons_per_emitter < 0:
            raise ValueError("photons_per_emitter must be >= 0")


def noise_levels(n=9, lo=8.0, hi=2048.0) -> np.ndarray:
    """Geometric photon levels; the default gives 8, 16, ..., 2048."""
    return np.geomspace(lo, hi, n)


def add_poisson_noise(raw: RawSimStack, ns: NoiseSpec) -> RawSimStack:
    """Shot noise at ``ns.photons_per_emitter``, returned on the input intensity scale.

    A unit-intensity emitter in focus contributes exactly 7 intensity units
    over the 7 frames of its plane (the pattern averages to 1 across phases
    and the lateral PSF has unit area), so one intensity unit is
    ``photons / 7`` expected counts. Each frame draws from its own RNG
    stream spawned from the seed.
    """
    if ns.photons_per_emitter <= 0:
        raise ValueError("photons_per_emitter must be positive")
    if np.any(raw.frames < 0):
        raise ValueError("Poisson noise needs a nonnegative stack")
    scale = ns.photons_per_emitter / FRAMES_PER_PLANE
    flat = raw.flat_frames()
    streams = np.random.SeedSequence(ns.seed).spawn(len(flat))
    noisy = np.empty_like(flat)
    for i, (frame, ss) in enumerate(zip(flat, streams)):
        noisy[i] = np.random.default_rng(ss).poisson(frame * scale) / scale
    return raw.with_frames(noisy.reshape(raw.frames.shape))
