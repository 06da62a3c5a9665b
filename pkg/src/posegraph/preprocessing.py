"""Local contrast normalisation (LCN) of RGB planes.

A 9x9 Gaussian-weighted local mean (pooled over channels) is subtracted, and
the result is divided by the local weighted standard deviation, floored at the
image-wide mean of that standard deviation map.  Near the borders the window
weights are renormalised over the in-bounds taps, so a constant image maps to
zero everywhere and adding a constant leaves the output unchanged.
"""
import numpy as np

from ._validation import check_plane
from .tensor import gaussian_kernel1d, symmetric_filter1d

LCN_SIZE = 9
LCN_SIGMA = 2.0
# absolute floor on the divisor; only matters for (near-)constant images
LCN_MIN_DIVISOR = 1e-4


def _window_average(x, size, sigma):
    """Channel-pooled Gaussian average with in-bounds renormalisation, shape (H, W)."""
    k = gaussian_kernel1d(sigma, radius=size // 2)
    pooled = x.mean(axis=2)
    num = symmetric_filter1d(symmetric_filter1d(pooled, k, 0), k, 1)
    ones = np.ones(pooled.shape)
    den = symmetric_filter1d(symmetric_filter1d(ones, k, 0), k, 1)
    return num / den


def local_mean(image, size=LCN_SIZE, sigma=LCN_SIGMA):
    """Gaussian-weighted local mean over a ``size`` x ``size`` window and all channels."""
    x = check_plane(image, "local_mean input", min_hw=(size, size))
    return _window_average(x, size, sigma)


def lcn(image, size=LCN_SIZE, sigma=LCN_SIGMA):
    """Subtractive then divisive local contrast normalisation; same shape as ``image``."""
    x = check_plane(image, "lcn input", min_hw=(size, size))
    centered = x - _window_average(x, size, sigma)[:, :, None]
    std = np.sqrt(_window_average(centered ** 2, size, sigma))
    divisor = np.maximum(std, std.mean())
    divisor = np.maximum(divisor, LCN_MIN_DIVISOR)
    return centered / divisor[:, :, None]
