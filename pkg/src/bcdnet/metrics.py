"""Distortion measures on [0, 1]-scaled NCHW images."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

# Gaussian window, stability constants and per-scale exponents of MS-SSIM
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0


def l1_distortion(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"l1_distortion: shape mismatch {a.shape} vs {b.shape}")
    return T.mean(T.tabs(a - b))


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float) -> float:
    if err <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB on the [0, 1] scale, capped at 99 dB for exact matches."""
    return psnr_from_mse(mse(a, b))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def ms_ssim_scales(height: int, width: int, max_scales: int = len(MS_SSIM_WEIGHTS)) -> int:
    """Number of scales whose (pooled) extent still fits the window."""
    scales = 0
    h, w = height, width
    while scales < max_scales and min(h, w) >= SSIM_WINDOW:
        scales += 1
        h, w = (h + 1) // 2, (w + 1) // 2
    return scales


@dataclass
class MsSsimInfo:
    scales: int
    weights: tuple


def _blur(x: Tensor, window: np.ndarray) -> Tensor:
    b, c, h, w = x.shape
    flat = T.reshape(x, (b * c, 1, h, w))
    k = len(window)
    row = Tensor(window.reshape(1, 1, 1, k).astype(x.dtype))
    col = Tensor(window.reshape(1, 1, k, 1).astype(x.dtype))
    out = T.conv2d(T.conv2d(flat, row), col)
    return T.reshape(out, (b, c) + out.shape[2:])


def _ssim_terms(x: Tensor, y: Tensor, window: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-(batch, channel) mean of the SSIM map and of the contrast-structure map."""
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_x = _blur(x, window)
    mu_y = _blur(y, window)
    num0 = 2.0 * (mu_x * mu_y)
    den0 = T.square(mu_x) + T.square(mu_y)
    luminance = (num0 + c1) / (den0 + c1)
    num1 = 2.0 * _blur(x * y, window)
    den1 = _blur(T.square(x) + T.square(y), window)
    cs = (num1 - num0 + c2) / (den1 - den0 + c2)
    return T.mean(luminance * cs, axis=(2, 3)), T.mean(cs, axis=(2, 3))


def _downsample(x: Tensor) -> Tensor:
    h, w = x.shape[2:]
    if h % 2:
        x = T.concat((x, x[:, :, h - 1 :, :]), axis=2)
    if w % 2:
        x = T.concat((x, x[:, :, :, w - 1 :]), axis=3)
    return T.avg_pool2(x)


def ms_ssim(a: Tensor, b: Tensor, max_scales: int = 5, full: bool = False):
    """Multi-scale SSIM averaged over batch and channels (unit dynamic range).

    The five standard exponents are used as given. Images too small for
    ``max_scales`` scales are evaluated on fewer scales with the leading
    exponents renormalized to sum to one; pass ``full=True``
    to also receive the scale count and exponents used.
    """
    if a.shape != b.shape:
        raise ShapeError(f"ms_ssim: shape mismatch {a.shape} vs {b.shape}")
    scales = ms_ssim_scales(a.shape[2], a.shape[3], max_scales)
    if scales == 0:
        raise ShapeError(f"ms_ssim: images of shape {a.shape} are smaller than the {SSIM_WINDOW}px window")
    weights = MS_SSIM_WEIGHTS
    if scales < len(MS_SSIM_WEIGHTS):
        kept = np.asarray(MS_SSIM_WEIGHTS[:scales], dtype=np.float64)
        weights = tuple(float(w) for w in kept / kept.sum())
    window = gaussian_window()
    x, y = a, b
    value = None
    for j in range(scales):
        if j:
            x, y = _downsample(x), _downsample(y)
        ssim_val, cs = _ssim_terms(x, y, window)
        term = ssim_val if j == scales - 1 else cs
        factor = T.power(T.relu(term), weights[j])
        value = factor if value is None else value * factor
    result = T.mean(value)
    if full:
        return result, MsSsimInfo(scales, weights)
    return result


def ms_ssim_value(a: np.ndarray, b: np.ndarray) -> float:
    """MS-SSIM of two (H, W, 3) or NCHW arrays in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 3:
        a = a.transpose(2, 0, 1)[None]
        b = b.transpose(2, 0, 1)[None]
    with T.no_grad():
        return ms_ssim(Tensor(a), Tensor(b)).item()
