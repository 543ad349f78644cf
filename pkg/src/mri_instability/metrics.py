"""SSIM, pSNR, degradation deltas and error maps.

SSIM uses a 7x7 uniform window with sample (N-1) normalisation of the local
variances and averages the SSIM map over the valid region only (no padding).
``data_range`` defaults to ``max(gt) - min(gt)`` of the reference image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatchError

WIN = 7
K1, K2 = 0.01, 0.03
PSNR_IDENTICAL = float("inf")


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def data_range_of(gt) -> float:
    gt = np.asarray(gt)
    return float(gt.max() - gt.min())


def _window_mean(img):
    return sliding_window_view(img, (WIN, WIN)).mean(axis=(-1, -2))


def ssim_map(a, b, data_range=None):
    a, b = _check(a, b)
    if a.ndim != 2 or min(a.shape) < WIN:
        raise ShapeMismatchError(f"ssim needs 2-D images of at least {WIN}x{WIN}, got {a.shape}")
    L = data_range_of(a) if data_range is None else float(data_range)
    if L <= 0:
        raise ValueError("data_range must be > 0")
    c1, c2 = (K1 * L) ** 2, (K2 * L) ** 2
    n = WIN * WIN
    cov_norm = n / (n - 1.0)
    ua, ub = _window_mean(a), _window_mean(b)
    vaa = cov_norm * (_window_mean(a * a) - ua * ua)
    vbb = cov_norm * (_window_mean(b * b) - ub * ub)
    vab = cov_norm * (_window_mean(a * b) - ua * ub)
    num = (2 * ua * ub + c1) * (2 * vab + c2)
    den = (ua * ua + ub * ub + c1) * (vaa + vbb + c2)
    return num / den


def ssim(a, b, data_range=None) -> float:
    return float(ssim_map(a, b, data_range).mean())


def psnr(a, b, data_range=None) -> float:
    """``10 log10(L^2 / MSE)``; ``inf`` when the images are identical."""
    a, b = _check(a, b)
    L = data_range_of(a) if data_range is None else float(data_range)
    err = np.mean((a - b) ** 2)
    if err == 0:
        return PSNR_IDENTICAL
    return float(10.0 * np.log10(L * L / err))


def delta_metrics(gt, clean_recon, pert_recon, data_range=None):
    """Quality drop ``(dSSIM, dpSNR)`` of ``pert_recon`` relative to ``clean_recon``.

    Both reconstructions are scored against ``gt``; positive means the
    perturbation made things worse.
    """
    gt, clean = _check(gt, clean_recon)
    _, pert = _check(gt, pert_recon)
    L = data_range_of(gt) if data_range is None else data_range
    d_ssim = ssim(gt, clean, L) - ssim(gt, pert, L)
    p_clean, p_pert = psnr(gt, clean, L), psnr(gt, pert, L)
    d_psnr = 0.0 if p_clean == p_pert else p_clean - p_pert
    return d_ssim, d_psnr


def mae_map(gt, recon) -> np.ndarray:
    gt, recon = _check(gt, recon)
    return np.abs(gt - recon)


@dataclass(frozen=True)
class MetricReport:
    ssim: float
    psnr: float
    mae_map: np.ndarray
    data_range: float


def evaluate(gt, recon, data_range=None) -> MetricReport:
    L = data_range_of(gt) if data_range is None else float(data_range)
    return MetricReport(ssim(gt, recon, L), psnr(gt, recon, L), mae_map(gt, recon), L)


def lag1_autocorrelation(img) -> float:
    """Mean of the horizontal and vertical lag-1 autocorrelation of a residual map."""
    r = np.asarray(img, dtype=np.float64)
    r = r - r.mean()
    denom = np.sum(r * r)
    if denom == 0:
        return 0.0
    h = np.sum(r[:, 1:] * r[:, :-1]) / denom
    v = np.sum(r[1:, :] * r[:-1, :]) / denom
    return float(0.5 * (h + v))
