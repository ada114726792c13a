"""Resolution and image-quality measurements.

FWHM is read from the autocorrelation of a stack, obtained as the inverse
transform of its (zero-padded) power spectrum. The autocorrelation profile is
modelled as a narrow Gaussian (the PSF autocorrelation) plus a broad one (the
cross-correlation between neighbouring emitters), and the FWHM comes from
the narrow component.

FFT convention: unnormalized forward transform (numpy default), so
``sum(P) == I.size * sum(I**2)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage, optimize, signal

from .core import Stack3D, normalize_unit_range

FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))


class FitError(RuntimeError):
    """The two-Gaussian fit did not converge; ``fit`` holds the best parameters found."""

    def __init__(self, message, fit):
        super().__init__(message)
        self.fit = fit


@dataclass(frozen=True)
class PaddedProfile:
    values: np.ndarray
    n: int
    p: int
    spacing_nm: float = 1.0

    @property
    def effective_spacing_nm(self) -> float:
        return self.spacing_nm * self.n / (self.n + self.p)


@dataclass(frozen=True)
class AcfFit:
    alpha_acf: float
    sigma_acf: float
    alpha_ccf: float
    sigma_ccf: float
    mu: float
    residual_rms: float

    @property
    def relative_residual(self) -> float:
        """RMS residual divided by the fitted peak height."""
        peak = self.alpha_acf + self.alpha_ccf
        return self.residual_rms / peak if peak > 0 else float("inf")

    def model(self, x) -> np.ndarray:
        return two_gaussians(x, self.alpha_acf, self.sigma_acf, self.alpha_ccf, self.sigma_ccf, self.mu)


@dataclass(frozen=True)
class AxisResolution:
    """FWHM along one axis. ``fwhm_nm`` is the raw autocorrelation width; a
    Gaussian PSF is narrower by sqrt(2), given as ``psf_fwhm_nm``."""

    axis: str
    fwhm_nm: float
    fit: AcfFit
    effective_spacing_nm: float

    @property
    def psf_fwhm_nm(self) -> float:
        return self.fwhm_nm / np.sqrt(2.0)


@dataclass(frozen=True)
class ResolutionReport:
    axial: AxisResolution
    lateral_x: AxisResolution
    lateral_y: AxisResolution

    @property
    def fwhm_axial_nm(self) -> float:
        return self.axial.fwhm_nm

    @property
    def fwhm_lateral_nm(self) -> float:
        """Mean of the x and y widths."""
        return 0.5 * (self.lateral_x.fwhm_nm + self.lateral_y.fwhm_nm)


def power_spectrum(stack: Stack3D) -> np.ndarray:
    """``|FFT3(I)|^2``, same axis order as ``stack.data`` (z, y, x)."""
    return np.abs(np.fft.fftn(stack.data)) ** 2


def axial_profile(P) -> np.ndarray:
    """Sum of the power spectrum over the lateral axes, indexed by kz."""
    return np.asarray(P).sum(axis=(1, 2))


def zero_pad_mid(S, p=None, spacing_nm=1.0) -> PaddedProfile:
    """Insert ``p`` zeros in the middle of a length-N spectrum (default ``p = 4N``).

    Samples with ``k < N/2`` stay in place, the rest move up by ``p``. For
    even N the output sample at index N/2 is one of the zeros.
    """
    S = np.asarray(S)
    n = len(S)
    if p is None:
        p = 4 * n
    if p < 0:
        raise ValueError("padding width must be >= 0")
    half = (n + 1) // 2
    out = np.concatenate([S[:half], np.zeros(p, dtype=S.dtype), S[half:]])
    return PaddedProfile(out, n, p, spacing_nm)


def _hermitian_defect(values, n, p, axis=-1):
    """Relative size of the anti-Hermitian part of a padded spectrum along ``axis``,
    ignoring the unpaired even-N Nyquist sample (its contribution is purely
    imaginary after the inverse transform and is dropped with the imaginary part)."""
    v = np.moveaxis(np.asarray(values), axis, -1)
    length = v.shape[-1]
    rev = np.conj(np.roll(v[..., ::-1], 1, axis=-1))
    anti = 0.5 * (v - rev)
    if n % 2 == 0 and p > 0:
        anti[..., n // 2] = 0
        anti[..., n // 2 + p] = 0
    scale = np.linalg.norm(v)
    return np.linalg.norm(anti) / scale if scale > 0 else 0.0


def acf(padded: PaddedProfile, tol=1e-8) -> np.ndarray:
    """Centred autocorrelation ``fftshift(ifft(S))``, real part.

    Raises if the spectrum is not symmetric enough for the imaginary part to
    be numerical residue.
    """
    defect = _hermitian_defect(padded.values, padded.n, padded.p)
    if defect > tol:
        raise ValueError(f"spectrum is not Hermitian (relative defect {defect:.2e})")
    return np.fft.fftshift(np.fft.ifft(padded.values)).real


def two_gaussians(x, a1, s1, a2, s2, mu):
    return a1 * np.exp(-0.5 * ((x - mu) / s1) ** 2) + a2 * np.exp(-0.5 * ((x - mu) / s2) ** 2)


def _peak_index(F):
    peaks = np.flatnonzero(F == F.max())
    centre = (len(F) - 1) / 2
    return int(peaks[np.argmin(np.abs(peaks - centre))])


def _half_max_sigma(y, mu):
    """Gaussian sigma implied by the half-height width of the peak above the profile floor."""
    h = y - y.min()
    half = 0.5 * h[mu]
    right = np.flatnonzero(h[mu:] < half)
    left = np.flatnonzero(h[:mu + 1][::-1] < half)
    widths = [w[0] for w in (left, right) if len(w)]
    hw = float(np.mean(widths)) if widths else len(y) / 4.0
    return max(hw, 0.5) / np.sqrt(2.0 * np.log(2.0))


def fit_two_gaussians(F, max_nfev=200, ftol=1e-10) -> AcfFit:
    """Bounded least-squares fit of two Gaussians sharing one centre.

    The narrow one is constrained below the broad one by fitting
    ``sigma_ccf = sigma_acf + gap`` with ``gap > 0``. Widths are in samples.
    Several starts are tried: (sigma 2, len/8), the measured half-height
    width, and a single narrow Gaussian. Among converged fits of equal cost
    the one giving the narrow component the most weight wins, so a lone
    Gaussian is read as autocorrelation rather than cross-correlation.
    """
    F = np.asarray(F, dtype=np.float64)
    n = len(F)
    x = np.arange(n, dtype=np.float64)
    scale = np.max(np.abs(F))
    if not np.isfinite(scale) or scale == 0:
        raise ValueError("cannot fit an all-zero or non-finite profile")
    y = F / scale

    mu0 = _peak_index(F)
    tail = float(np.clip(y[min(n - 1, int(round(mu0 + n / 8)))], 0.0, 1.0))
    s_hm = _half_max_sigma(y, mu0)
    starts = [
        (max(y[mu0] - tail, 1e-3), 2.0, tail, max(n / 8.0 - 2.0, 1.0)),
        (y[mu0] - y.min() + 1e-3, s_hm, max(y.min(), 0.0), 3.0 * s_hm),
        (y[mu0], s_hm, 0.0, float(n)),
    ]

    def resid(theta):
        a1, s1, a2, gap, mu = theta
        return two_gaussians(x, a1, s1, a2, s1 + gap, mu) - y

    lo = [0.0, 0.05, 0.0, 1e-6, 0.0]
    hi = [np.inf, 10.0 * n, np.inf, 100.0 * n, n - 1.0]
    converged, failed = [], []
    for a1, s1, a2, gap in starts:
        theta0 = np.clip([a1, s1, a2, gap, float(mu0)], lo, hi)
        res = optimize.least_squares(resid, theta0, bounds=(lo, hi), method="trf", ftol=ftol,
                                     xtol=1e-12, gtol=1e-12, max_nfev=max_nfev, x_scale="jac")
        (failed if res.status == 0 else converged).append(res)

    def to_fit(res):
        a1, s1, a2, gap, mu = res.x
        rms = float(np.sqrt(np.mean(res.fun ** 2))) * scale
        return AcfFit(a1 * scale, s1, a2 * scale, s1 + gap, mu, rms)

    if not converged:
        best_failed = min(failed, key=lambda r: r.cost)
        raise FitError(f"two-Gaussian fit did not converge in {max_nfev} evaluations", to_fit(best_failed))
    min_cost = min(r.cost for r in converged)
    tied = [r for r in converged if r.cost <= 1.01 * min_cost + 1e-12 * n]
    return to_fit(max(tied, key=lambda r: r.x[0] / (r.x[0] + r.x[2] + 1e-300)))


def fwhm_from_profile(F, effective_spacing_nm) -> tuple[float, AcfFit]:
    fit = fit_two_gaussians(F)
    return FWHM_PER_SIGMA * fit.sigma_acf * effective_spacing_nm, fit


def fwhm_axial(stack: Stack3D, p=None) -> AxisResolution:
    S = axial_profile(power_spectrum(stack))
    padded = zero_pad_mid(S, p, stack.spacing[2])
    fwhm, fit = fwhm_from_profile(acf(padded), padded.effective_spacing_nm)
    return AxisResolution("z", fwhm, fit, padded.effective_spacing_nm)


def _lateral_acf(stack: Stack3D, p, axis):
    P2 = power_spectrum(stack).sum(axis=0)  # (ky, kx)
    spacing = stack.spacing[0]
    if axis == "y":
        P2 = P2.T
        spacing = stack.spacing[1]
    n = P2.shape[1]
    p = 4 * n if p is None else p
    half = (n + 1) // 2
    padded = np.concatenate([P2[:, :half], np.zeros((P2.shape[0], p)), P2[:, half:]], axis=1)
    # 2D Hermitian check: P2[-ky, -kx] == P2[ky, kx]
    flipped = np.roll(padded[::-1, ::-1], 1, axis=(0, 1))
    anti = 0.5 * (padded - flipped)
    if n % 2 == 0 and p > 0:
        anti[:, n // 2] = 0
        anti[:, n // 2 + p] = 0
    if np.linalg.norm(anti) > 1e-8 * np.linalg.norm(padded):
        raise ValueError("lateral power spectrum is not Hermitian")
    F2 = np.fft.fftshift(np.fft.ifft2(padded)).real
    row = np.unravel_index(np.argmax(F2), F2.shape)[0]
    return F2[row], PaddedProfile(padded[row], n, p, spacing)


def fwhm_lateral(stack: Stack3D, p=None, axis="x") -> AxisResolution:
    """Lateral FWHM along ``axis`` ('x' or 'y') from the ACF row through the peak."""
    if axis not in ("x", "y"):
        raise ValueError("axis must be 'x' or 'y'")
    F, padded = _lateral_acf(stack, p, axis)
    fwhm, fit = fwhm_from_profile(F, padded.effective_spacing_nm)
    return AxisResolution(axis, fwhm, fit, padded.effective_spacing_nm)


def measure_resolution(stack: Stack3D, p=None, padding_factor=4) -> ResolutionReport:
    """Axial and both lateral FWHMs. Without an explicit ``p`` each axis is
    padded by ``padding_factor`` times its own length."""
    nx, ny, nz = stack.dims
    pick = lambda n: p if p is not None else padding_factor * n  # noqa: E731
    return ResolutionReport(fwhm_axial(stack, pick(nz)), fwhm_lateral(stack, pick(nx), "x"),
                            fwhm_lateral(stack, pick(ny), "y"))


# -- image similarity ----------------------------------------------------------

def _check_pair(a: Stack3D, b: Stack3D):
    if a.data.shape != b.data.shape:
        raise ValueError(f"stack shapes differ: {a.data.shape} vs {b.data.shape}")


def mse(a: Stack3D, b: Stack3D) -> float:
    _check_pair(a, b)
    return float(np.mean((a.data - b.data) ** 2))


def ssim_2d(x, y, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0) -> float:
    """Gaussian-window SSIM (11x11 window at sigma 1.5), averaged over the image."""
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    # truncate=3.5 at sigma=1.5 gives a radius-5 (11 tap) window
    blur = lambda im: ndimage.gaussian_filter(im, sigma, truncate=3.5, mode="reflect")  # noqa: E731
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a: Stack3D, b: Stack3D) -> float:
    """Mean over z-slices of 2D SSIM; inputs are expected in [0, 1]."""
    _check_pair(a, b)
    return float(np.mean([ssim_2d(sa, sb) for sa, sb in zip(a.data, b.data)]))


# -- sub-resolution phantoms ------------------------------------------------------

def z_profile(stack: Stack3D, floor=1e-3) -> np.ndarray:
    """Mean over x, y after normalizing to [0, 1] and zeroing values below ``floor``."""
    data = normalize_unit_range(stack).data
    data = np.where(data < floor, 0.0, data)
    return data.mean(axis=(1, 2))


def count_maxima(profile) -> int:
    peaks, _ = signal.find_peaks(np.concatenate([[-np.inf], profile, [-np.inf]]))
    return len(peaks)


def maxima_positions(profile) -> np.ndarray:
    peaks, _ = signal.find_peaks(np.concatenate([[-np.inf], profile, [-np.inf]]))
    return peaks - 1


def grating_contrast(stack: Stack3D, plane_z_nm) -> float:
    """Mean Michelson contrast between adjacent planes of a layered phantom.

    The z-profile is sampled at each plane position (peaks) and halfway
    between neighbours (troughs); a pair's peak level is the mean of its two
    plane samples.
    """
    planes = np.sort(np.asarray(plane_z_nm, dtype=np.float64))
    if len(planes) < 2:
        raise ValueError("need at least two planes")
    prof = z_profile(stack)
    z = np.arange(len(prof)) * stack.spacing[2]
    at = lambda pos: np.interp(pos, z, prof)  # noqa: E731
    contrasts = []
    for z0, z1 in zip(planes[:-1], planes[1:]):
        peak = 0.5 * (at(z0) + at(z1))
        trough = at(0.5 * (z0 + z1))
        contrasts.append((peak - trough) / (peak + trough) if peak + trough > 0 else 0.0)
    return float(np.mean(contrasts))


# -- frame-masking ablation ---------------------------------------------------------

@dataclass(frozen=True)
class AblationResult:
    baseline: tuple[float, float]
    masked: list[tuple[float, float]]

    def n_masks_not_better(self) -> int:
        """Masks whose MSE is no lower than the unmasked run."""
        return sum(m >= self.baseline[0] for m, _ in self.masked)


def masked_frame_ablation(model: Callable[[np.ndarray], np.ndarray], chunk_input, metric_ref: Stack3D) -> AblationResult:
    """Zero each input frame in turn and score the model output against ``metric_ref``."""
    chunk_input = np.asarray(chunk_input, dtype=np.float64)

    def score(inp):
        out = Stack3D(model(inp), metric_ref.spacing)
        return mse(out, metric_ref), ssim(out, metric_ref)

    baseline = score(chunk_input)
    masked = []
    for j in range(chunk_input.shape[0]):
        inp = chunk_input.copy()
        inp[j] = 0.0
        masked.append(score(inp))
    return AblationResult(baseline, masked)
