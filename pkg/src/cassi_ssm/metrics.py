"""PSNR and SSIM as used for reconstruction quality reporting.

SSIM uses the canonical 11x11 Gaussian window (sigma 1.5) with
C1 = (0.01 * range)^2 and C2 = (0.03 * range)^2, averaged over the valid
window positions.  PSNR is capped at 100 dB, returned exactly at zero MSE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class MetricReport:
    band_psnr: tuple
    band_ssim: tuple
    psnr_mean: float
    ssim_mean: float
    data_range: float


def psnr(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    """10*log10(range^2 / MSE) in dB, capped at 100."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(data_range * data_range / mse)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g1 = np.exp(-0.5 * (ax / sigma) ** 2)
    win = np.outer(g1, g1)
    return win / win.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    """Mean structural similarity of two single-band images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    h, w = a.shape
    k = SSIM_WINDOW
    if h < k or w < k:
        raise ValueError(f"image {h}x{w} smaller than the {k}x{k} SSIM window")
    win = _gaussian_window(k, SSIM_SIGMA)

    wa = np.lib.stride_tricks.sliding_window_view(a, (k, k))
    wb = np.lib.stride_tricks.sliding_window_view(b, (k, k))
    mu_a = np.einsum("hwij,ij->hw", wa, win)
    mu_b = np.einsum("hwij,ij->hw", wb, win)
    m_aa = np.einsum("hwij,ij->hw", wa * wa, win)
    m_bb = np.einsum("hwij,ij->hw", wb * wb, win)
    m_ab = np.einsum("hwij,ij->hw", wa * wb, win)
    var_a = m_aa - mu_a * mu_a
    var_b = m_bb - mu_b * mu_b
    cov = m_ab - mu_a * mu_b

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def evaluate(cube_a: np.ndarray, cube_b: np.ndarray, data_range: float | None = None) -> MetricReport:
    """Per-band PSNR/SSIM of two cubes, averaged over bands.

    cube_a is the reference; when data_range is omitted it defaults to the
    reference maximum (1.0 if the reference is empty of signal).
    """
    cube_a = np.asarray(cube_a, dtype=np.float64)
    cube_b = np.asarray(cube_b, dtype=np.float64)
    if cube_a.shape != cube_b.shape:
        raise ValueError(f"shape mismatch: {cube_a.shape} vs {cube_b.shape}")
    if data_range is None:
        peak = float(cube_a.max())
        data_range = peak if peak > 0 else 1.0
    band_psnr = tuple(psnr(cube_a[i], cube_b[i], data_range) for i in range(cube_a.shape[0]))
    band_ssim = tuple(ssim(cube_a[i], cube_b[i], data_range) for i in range(cube_a.shape[0]))
    return MetricReport(
        band_psnr=band_psnr,
        band_ssim=band_ssim,
        psnr_mean=float(np.mean(band_psnr)),
        ssim_mean=float(np.mean(band_ssim)),
        data_range=float(data_range),
    )
