"""Image quality metrics: PSNR, windowed SSIM, mu-law HDR PSNR.

SSIM uses the standard 11x11 gaussian window (sigma 1.5) with zero padding
at the borders and constants K1=0.01, K2=0.03. It is written on torch
tensors so the same code path serves both evaluation and SSIM-based
optimization objectives.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from torch.nn import functional as F

from .core import ConfigError, DataError
from .tonemap import mu_law, mu_law_normalizer


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(window: int, sigma: float, dtype) -> torch.Tensor:
    half = window // 2
    coords = torch.arange(window, dtype=dtype) - half
    g = torch.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    k = torch.outer(g, g)
    return k / k.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> torch.Tensor:
    """Mean SSIM over pixels and channels; differentiable in both inputs.

    a, b: (H, W) or (H, W, C) arrays/tensors on the same scale as `peak`.
    """
    a = _to_tensor(a)
    b = _to_tensor(b)
    if a.shape != b.shape:
        raise ConfigError(f"ssim shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise ConfigError("ssim expects (H, W) or (H, W, C) images")
    dtype = torch.promote_types(a.dtype, b.dtype)
    a = a.to(dtype).permute(2, 0, 1)[:, None]  # (C, 1, H, W)
    b = b.to(dtype).permute(2, 0, 1)[:, None]
    kernel = _gaussian_window(window, sigma, dtype)[None, None]
    pad = window // 2

    def blur(x):
        return F.conv2d(x, kernel, padding=pad)

    mu_a = blur(a)
    mu_b = blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) \
        / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return score.mean()


def ssim_value(a, b, **kw) -> float:
    return float(ssim(a, b, **kw).detach())


def hdr_psnr_mulaw(pred_hdr, gt_hdr) -> float:
    """PSNR between mu-law compressed radiance maps.

    Both buffers share one normalizer: the 99th percentile of the ground
    truth (max over channels), which suppresses extreme highlights and makes
    the metric invariant to a common positive rescale of both inputs.
    """
    pred = np.asarray(pred_hdr, dtype=np.float64)
    gt = np.asarray(gt_hdr, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ConfigError(f"hdr psnr shape mismatch {pred.shape} vs {gt.shape}")
    if np.all(gt == 0):
        raise DataError("ground-truth radiance is identically zero")
    norm = mu_law_normalizer(gt)
    if norm <= 0:
        raise DataError("ground-truth 99th percentile is not positive")
    return psnr(mu_law(pred, norm), mu_law(gt, norm), peak=1.0)
