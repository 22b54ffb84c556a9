"""MSE, PSNR and whole-image SSIM on images scaled to [0, 1]."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class SsimConstants:
    c1: float = 1e-4
    c2: float = 9e-4

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("c1 and c2 must be positive")

    @classmethod
    def for_range(cls, dynamic_range: float = 1.0) -> "SsimConstants":
        return cls((0.01 * dynamic_range) ** 2, (0.03 * dynamic_range) ** 2)


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DimensionError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    return y, y_hat


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    diff = y - y_hat
    return float(np.mean(diff * diff))


def psnr(y, y_hat) -> float:
    """10 log10(max(y)^2 / mse), with the peak taken from the reference ``y``.

    The peak is the actual maximum of ``y`` rather than a fixed dynamic range.
    Identical images give ``math.inf``.
    """
    y, y_hat = _pair(y, y_hat)
    peak = float(y.max())
    if peak == 0:
        raise DomainError("reference image has max value 0")
    err = mse(y, y_hat)
    if err == 0:
        return math.inf
    return 10 * math.log10(peak * peak / err)


def ssim_global(x, y, constants: SsimConstants = SsimConstants()) -> float:
    """SSIM from whole-plane statistics, averaged over every (image, channel) plane.

    Rank-4 input is read as (N, C, H, W); rank 3 as (C, H, W); rank 2 as one plane.
    """
    x, y = _pair(x, y)
    if x.ndim < 2:
        raise DimensionError("ssim_global needs at least a 2-D image")
    x = x.reshape(-1, x.shape[-2] * x.shape[-1])
    y = y.reshape(-1, y.shape[-2] * y.shape[-1])
    mu_x = x.mean(axis=1)
    mu_y = y.mean(axis=1)
    dx = x - mu_x[:, None]
    dy = y - mu_y[:, None]
    var_x = (dx * dx).mean(axis=1)
    var_y = (dy * dy).mean(axis=1)
    cov = (dx * dy).mean(axis=1)
    c1, c2 = constants.c1, constants.c2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    per_plane = np.where(num == den, 1.0, num / den)
    return float(per_plane.mean())
