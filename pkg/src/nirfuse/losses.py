"""Multi-scale training loss and image quality metrics."""

from __future__ import annotations

import math
from typing import List, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor4

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def gt_pyramid(gt: Tensor4, levels: int) -> List[Tensor4]:
    """[gt, pool(gt), pool(pool(gt)), ...] with ``levels`` entries (2x2 average pooling)."""
    if levels < 1:
        raise ShapeError(f"levels must be >= 1, got {levels}")
    m = 2 ** (levels - 1)
    h, w = gt.shape[2:]
    if h % m or w % m:
        raise ShapeError(f"target {h}x{w} is not divisible by {m} for a {levels}-level pyramid")
    out = [gt]
    for _ in range(levels - 1):
        out.append(T.downsample2x(out[-1]))
    return out


def multiscale_loss(outputs: Sequence[Tensor4], targets: Sequence[Tensor4]) -> Tensor4:
    """Sum over levels of the RMS residual between output and target.

    RMS is the l2 norm divided by sqrt(number of elements), so each level
    contributes on the same scale regardless of its resolution.
    """
    if len(outputs) != len(targets) or not outputs:
        raise ShapeError(f"pyramid lengths differ: {len(outputs)} outputs vs {len(targets)} targets")
    for o, t in zip(outputs, targets):
        if o.shape != t.shape:
            raise ShapeError(f"pyramid level shapes differ: {o.shape} vs {t.shape}")
    return T.add_all([T.rms_diff(o, t) for o, t in zip(outputs, targets)])


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor4) else x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images are identical."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape {a.shape} does not match {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian over the last two axes, valid windows only
    x = sliding_window_view(x, g.size, axis=-1) @ g
    return np.swapaxes(sliding_window_view(np.swapaxes(x, -1, -2), g.size, axis=-1) @ g, -1, -2)


def _planes(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        return x
    if x.ndim == 4:
        return x.reshape(-1, *x.shape[2:])
    raise ShapeError(f"ssim expects a 2-4 dimensional image, got shape {x.shape}")


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Per-plane SSIM maps over all valid 11x11 Gaussian windows."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape {a.shape} does not match {b.shape}")
    a, b = _planes(a), _planes(b)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"ssim: image {a.shape[-2:]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over windows and channels (Gaussian window 11x11, sigma 1.5)."""
    return float(ssim_map(a, b, data_range).mean())
