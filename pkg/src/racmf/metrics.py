"""Image-quality metrics: PSNR, SSIM, concordance (CCC), and noise power spectra."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

from .errors import DimensionError, SpecificationError

PSNR_CAP_DB = 60.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class PsnrResult:
    db: float
    exact_match: bool  # True when MSE == 0 and the cap was applied

    def __float__(self) -> float:
        return self.db


def psnr(x: np.ndarray, y: np.ndarray, max_value: float) -> PsnrResult:
    """10*log10(MAX^2 / MSE); an exact match returns the capped 60 dB."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"psnr shapes differ: {x.shape} vs {y.shape}")
    if max_value <= 0:
        raise SpecificationError(f"max_value must be > 0, got {max_value}")
    mse = np.mean((x - y) ** 2)
    if mse == 0.0:
        return PsnrResult(PSNR_CAP_DB, True)
    return PsnrResult(10.0 * np.log10(max_value**2 / mse), False)


def masked_psnr(x: np.ndarray, y: np.ndarray, mask: np.ndarray,
                max_value: float) -> PsnrResult:
    """PSNR with the MSE restricted to mask pixels."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if not (x.shape == y.shape == mask.shape):
        raise DimensionError(f"shapes differ: {x.shape}, {y.shape}, {mask.shape}")
    if not mask.any():
        raise SpecificationError("mask selects no pixels")
    mse = np.mean((x[mask] - y[mask]) ** 2)
    if mse == 0.0:
        return PsnrResult(PSNR_CAP_DB, True)
    return PsnrResult(10.0 * np.log10(max_value**2 / mse), False)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float) -> np.ndarray:
    """Local SSIM map with an 11x11 Gaussian window (sigma 1.5), reflect padding."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"ssim shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise SpecificationError(
            f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if data_range <= 0:
        raise SpecificationError(f"data_range must be > 0, got {data_range}")
    win = _gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = correlate(x, win, mode="reflect")
    mu_y = correlate(y, win, mode="reflect")
    var_x = correlate(x * x, win, mode="reflect") - mu_x**2
    var_y = correlate(y * y, win, mode="reflect") - mu_y**2
    cov = correlate(x * y, win, mode="reflect") - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    """Mean of the local SSIM map."""
    return float(ssim_map(x, y, data_range).mean())


def masked_ssim(x: np.ndarray, y: np.ndarray, mask: np.ndarray, data_range: float) -> float:
    """Mean of the local SSIM map over mask pixels."""
    mask = np.asarray(mask).astype(bool)
    if mask.shape != np.asarray(x).shape:
        raise DimensionError(f"mask shape {mask.shape} != image shape {np.asarray(x).shape}")
    if not mask.any():
        raise SpecificationError("mask selects no pixels")
    return float(ssim_map(x, y, data_range)[mask].mean())


def ccc(s: np.ndarray, t: np.ndarray) -> float:
    """Concordance correlation coefficient, covariance form with population moments.

    Degenerate rules: two identical constant series give 1; otherwise the
    covariance form applies (0 whenever the covariance is 0).
    """
    s = np.asarray(s, dtype=np.float64).ravel()
    t = np.asarray(t, dtype=np.float64).ravel()
    if s.shape != t.shape:
        raise DimensionError(f"series lengths differ: {s.size} vs {t.size}")
    if s.size < 2:
        raise SpecificationError(f"ccc needs at least 2 samples, got {s.size}")
    mu_s, mu_t = s.mean(), t.mean()
    var_s = np.mean((s - mu_s) ** 2)
    var_t = np.mean((t - mu_t) ** 2)
    cov = np.mean((s - mu_s) * (t - mu_t))
    den = var_s + var_t + (mu_s - mu_t) ** 2
    if den == 0.0:
        return 1.0  # both series constant and equal
    return float(2.0 * cov / den)


@dataclass(frozen=True)
class NPSProfile:
    spectrum: np.ndarray      # 2-D mean power spectrum
    bin_centers: np.ndarray   # radial spatial-frequency bin centers (cycles/pixel)
    profile: np.ndarray       # mean power per radial bin
    n_rois: int


def nps(rois: list[np.ndarray]) -> NPSProfile:
    """Noise power spectrum averaged over homogeneous square patches.

    Per patch: subtract the patch mean, 2-D DFT, squared magnitude divided by
    the pixel count; the patch average is then radially binned into side/2
    bins. Under this normalization the spectrum mean equals the mean
    per-patch variance (Parseval).
    """
    if len(rois) < 1:
        raise SpecificationError("nps needs at least one patch")
    first = np.asarray(rois[0])
    side = first.shape[0]
    if first.ndim != 2 or first.shape[0] != first.shape[1]:
        raise SpecificationError(f"patches must be square, got {first.shape}")
    if side < 8:
        raise SpecificationError(f"patch side must be >= 8, got {side}")
    spectrum = np.zeros((side, side), dtype=np.float64)
    for roi in rois:
        roi = np.asarray(roi, dtype=np.float64)
        if roi.shape != first.shape:
            raise SpecificationError(
                f"mixed patch sizes: {roi.shape} vs {first.shape}")
        resid = roi - roi.mean()
        spectrum += np.abs(np.fft.fft2(resid)) ** 2 / roi.size
    spectrum /= len(rois)

    freqs = np.fft.fftfreq(side)
    mag = np.sqrt(freqs[:, None] ** 2 + freqs[None, :] ** 2)
    n_bins = side // 2
    edges = np.linspace(0.0, mag.max(), n_bins + 1)
    idx = np.clip(np.digitize(mag.ravel(), edges) - 1, 0, n_bins - 1)
    power = np.zeros(n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=spectrum.ravel(), minlength=n_bins)
    nonzero = counts > 0
    power[nonzero] = sums[nonzero] / counts[nonzero]
    centers = 0.5 * (edges[:-1] + edges[1:])
    return NPSProfile(spectrum=spectrum, bin_centers=centers, profile=power,
                      n_rois=len(rois))


def nps_profile_distance(a: NPSProfile, b: NPSProfile) -> float:
    """L2 distance between two radial NPS profiles."""
    if a.profile.shape != b.profile.shape:
        raise DimensionError(
            f"profiles have different bin counts: {a.profile.size} vs {b.profile.size}")
    return float(np.sqrt(np.sum((a.profile - b.profile) ** 2)))
