"""Image quality metrics on [0, 1] images shaped [H, W, C]."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ShapeError

PSNR_CAP = 100.0


def _check(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: Tensor, b: Tensor) -> float:
    _check(a, b)
    mse = (a.double() - b.double()).pow(2).mean().item()
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a: Tensor, b: Tensor, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid window positions and channels (data range 1)."""
    _check(a, b)
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < window:
        raise ShapeError(f"images must be at least {window}x{window} for SSIM")
    C1, C2 = 0.01**2, 0.03**2
    x = a.double().permute(2, 0, 1)[:, None]
    y = b.double().permute(2, 0, 1)[:, None]
    w = _gaussian_window(window, sigma)[None, None]

    def blur(t):
        return F.conv2d(t, w)

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    s = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    return float(s.mean())
