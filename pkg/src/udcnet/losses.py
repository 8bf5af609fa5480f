"""Training objective (L1 + SSIM + gradient) and the PSNR/SSIM metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

SSIM_WEIGHT = 0.1


@dataclass
class LossBundle:
    l1: Tensor
    ssim_loss: Tensor
    grad_loss: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("l1", "ssim_loss", "grad_loss", "total")}


def _pair(pred: Tensor, target: Tensor, name: str) -> None:
    T._require_4d(pred, name)
    if pred.shape != target.shape:
        raise ShapeError(f"{name}: pred {pred.shape} and target {target.shape} differ")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    _pair(pred, target, "l1_loss")
    return T.reduce(T.absolute(pred - target), "mean")


@lru_cache(maxsize=None)
def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: Tensor, taps: np.ndarray) -> Tensor:
    """Valid-mode separable Gaussian filter applied per channel."""
    c = x.shape[1]
    k = taps.size
    row = Tensor(np.broadcast_to(taps.astype(x.dtype), (c, 1, 1, k)).copy())
    col = Tensor(np.broadcast_to(taps.astype(x.dtype)[:, None], (c, 1, k, 1)).copy())
    return T.depthwise_conv2d(T.depthwise_conv2d(x, row), col)


def ssim_map(pred: Tensor, target: Tensor, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> Tensor:
    _pair(pred, target, "ssim")
    if pred.shape[2] < window or pred.shape[3] < window:
        raise ShapeError(f"ssim: image {pred.shape[2:]} smaller than the {window}x{window} window")
    taps = gaussian_window(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = _blur(pred, taps)
    mu_y = _blur(target, taps)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = _blur(T.square(pred), taps) - mu_xx
    s_yy = _blur(T.square(target), taps) - mu_yy
    s_xy = _blur(pred * target, taps) - mu_xy
    num = (2 * mu_xy + c1) * (2 * s_xy + c2)
    den = (mu_xx + mu_yy + c1) * (s_xx + s_yy + c2)
    return num / den


def ssim(pred: Tensor, target: Tensor, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> Tensor:
    """Mean SSIM over valid window positions, channels and batch.

    Images in a batch share one size, so this equals the batch mean of
    per-image SSIM values.
    """
    return T.reduce(ssim_map(pred, target, window, sigma, data_range), "mean")


def ssim_loss(pred: Tensor, target: Tensor) -> Tensor:
    return 1.0 - ssim(pred, target)


def _diffs(x: Tensor) -> tuple[Tensor, Tensor]:
    _, _, h, w = x.shape
    dx = T.crop(x, 0, 1, h, w - 1) - T.crop(x, 0, 0, h, w - 1)
    dy = T.crop(x, 1, 0, h - 1, w) - T.crop(x, 0, 0, h - 1, w)
    return dx, dy


def gradient_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean L1 distance of forward differences along x plus along y."""
    _pair(pred, target, "gradient_loss")
    if pred.shape[2] < 2 or pred.shape[3] < 2:
        raise ShapeError(f"gradient_loss: need h, w >= 2, got {pred.shape[2:]}")
    pdx, pdy = _diffs(pred)
    tdx, tdy = _diffs(target)
    return T.reduce(T.absolute(pdx - tdx), "mean") + T.reduce(T.absolute(pdy - tdy), "mean")


def combined_loss(pred: Tensor, target: Tensor) -> LossBundle:
    l1 = l1_loss(pred, target)
    s = ssim_loss(pred, target)
    g = gradient_loss(pred, target)
    return LossBundle(l1=l1, ssim_loss=s, grad_loss=g, total=SSIM_WEIGHT * s + l1 + g)


def psnr(pred, target, peak: float = 1.0) -> float:
    """PSNR in dB; ``math.inf`` when the inputs are identical."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if p.shape != t.shape:
        raise ShapeError(f"psnr: shapes {p.shape} and {t.shape} differ")
    mse = float(np.mean((p.astype(np.float64) - t.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)
