"""Dense array kernels: convolution, pooling, resampling and smoothing.

Images, feature maps and response maps are ``numpy`` float64 arrays.  Single
images use ``(H, W, C)``; batched kernels use ``(N, H, W, C)`` and the filter
banks are stored as ``(out_maps, in_maps, kh, kw)``.

Two convolution orientations coexist on purpose:

* :func:`conv2d_valid` is a cross-correlation, used by the learned network
  layers where orientation is absorbed into the weights.
* :func:`conv2d_same_centered` is a true convolution with an origin-centred
  kernel, used to propagate offset distributions where direction matters.
"""
from dataclasses import dataclass
import math

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view

from ._validation import check_map, check_plane, check_positive_int
from .exceptions import ContractViolation


@dataclass(frozen=True)
class KernelStack:
    """Filter bank ``weights`` of shape (out, in, kh, kw) and one bias per output map."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 4:
            raise ContractViolation(f"kernel weights must be 4D (out, in, kh, kw), got shape {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise ContractViolation(f"bias length {b.shape[0]} does not match {w.shape[0]} output maps")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ContractViolation("kernel stack contains NaN or Inf")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def shape(self):
        return self.weights.shape


# ---------------------------------------------------------------------------
# batched building blocks (N, H, W, C)
# ---------------------------------------------------------------------------

def im2col(x, kh, kw, stride=1):
    """Unfold ``x`` (N, H, W, C) into rows of receptive fields.

    Returns ``(cols, (Ho, Wo))`` where ``cols`` has shape (N*Ho*Wo, kh*kw*C),
    columns ordered (dy, dx, c) to match :func:`kernel_matrix`.
    """
    n, h, w, c = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    x = np.ascontiguousarray(x)
    sn, sh, sw, sc = x.strides
    cols = np.empty((n, ho, wo, kh, kw, c))
    for dy in range(kh):
        # each (row, dy) slice is one contiguous run of kw * c values in x
        rows = as_strided(x[:, dy:], shape=(n, ho, wo, kw, c),
                          strides=(sn, sh * stride, sw * stride, sw, sc), writeable=False)
        cols[:, :, :, dy] = rows
    return cols.reshape(n * ho * wo, kh * kw * c), (ho, wo)


def kernel_matrix(weights):
    """(out, in, kh, kw) filter bank as an (out, kh*kw*in) matrix in im2col order."""
    m = weights.shape[0]
    return weights.transpose(0, 2, 3, 1).reshape(m, -1)


def kernel_from_matrix(mat, shape):
    """Inverse of :func:`kernel_matrix` for a bank of the given (out, in, kh, kw) shape."""
    m, c, kh, kw = shape
    return mat.reshape(m, kh, kw, c).transpose(0, 3, 1, 2)


def col2im(dcols, x_shape, kh, kw, stride=1):
    """Adjoint of :func:`im2col`: scatter-add column gradients back onto the input."""
    n, h, w, c = x_shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    d = dcols.reshape(n, ho, wo, kh, kw, c)
    dx = np.zeros(x_shape)
    for dy in range(kh):
        ys = slice(dy, dy + stride * (ho - 1) + 1, stride)
        for dxx in range(kw):
            dx[:, ys, dxx:dxx + stride * (wo - 1) + 1:stride, :] += d[:, :, :, dy, dxx, :]
    return dx


def conv2d_valid_batch(x, weights, bias, stride=1):
    """Valid-mode cross-correlation of a batch; returns (out, cols) for reuse in backprop."""
    m, cin, kh, kw = weights.shape
    if x.shape[3] != cin:
        raise ContractViolation(
            f"input has {x.shape[3]} channels but kernels expect {cin}: "
            f"input shape {x.shape}, kernel shape {weights.shape}"
        )
    if x.shape[1] < kh or x.shape[2] < kw:
        raise ContractViolation(
            f"input spatial extent {x.shape[1:3]} is smaller than kernel {weights.shape}"
        )
    cols, (ho, wo) = im2col(x, kh, kw, stride)
    out = cols @ kernel_matrix(weights).T
    out += bias
    return out.reshape(x.shape[0], ho, wo, m), cols


def maxpool_batch(x, window):
    """Non-overlapping max pooling of (N, H, W, C) with edge-replicated remainders.

    Returns ``(out, argmax)`` where ``argmax`` holds the within-window index
    (row-major, lowest index wins ties) of every winner.
    """
    n, h, w, c = x.shape
    p = window
    hp = -(-h // p) * p
    wp = -(-w // p) * p
    if hp != h or wp != w:
        x = np.pad(x, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)), mode="edge")
    blocks = x.reshape(n, hp // p, p, wp // p, p, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, hp // p, wp // p, c, p * p)
    arg = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool_backward(dout, argmax, x_shape, window):
    """Route pooled gradients to the recorded winners."""
    n, h, w, c = x_shape
    p = window
    ho, wo = argmax.shape[1:3]
    hp, wp = ho * p, wo * p
    d = np.zeros((n, ho, wo, c, p * p))
    np.put_along_axis(d, argmax[..., None], dout[..., None], axis=-1)
    d = d.reshape(n, ho, wo, c, p, p).transpose(0, 1, 4, 2, 5, 3).reshape(n, hp, wp, c)
    if hp == h and wp == w:
        return d
    # fold the replicated border back onto the edge it was copied from
    dx = d[:, :h, :w].copy()
    if hp > h:
        dx[:, h - 1, :, :] += d[:, h:, :w].sum(axis=1)
    if wp > w:
        dx[:, :, w - 1, :] += d[:, :h, w:].sum(axis=2)
    if hp > h and wp > w:
        dx[:, h - 1, w - 1, :] += d[:, h:, w:].sum(axis=(1, 2))
    return dx


# ---------------------------------------------------------------------------
# single-plane operations
# ---------------------------------------------------------------------------

def conv2d_valid(image, kernels, stride=1):
    """Valid-mode cross-correlation of one (H, W, C) plane with a :class:`KernelStack`.

    ``out[y, x, m] = bias[m] + sum_{c,dy,dx} w[m, c, dy, dx] * in[y*s + dy, x*s + dx, c]``
    """
    x = check_plane(image, "conv2d_valid input")
    stride = check_positive_int(stride, "stride")
    out, _ = conv2d_valid_batch(x[None], kernels.weights, kernels.bias, stride)
    return out[0]


def conv2d_same_centered(a, prior):
    """True 2D convolution of map ``a`` with an origin-centred kernel, same-size output.

    ``out(x) = sum_y prior(x - y) * a(y)`` with the prior's origin at its centre
    cell; taps falling outside ``a`` contribute zero.
    """
    a = check_map(a, "conv2d_same_centered map")
    p = check_map(prior, "conv2d_same_centered prior")
    ph, pw = p.shape
    if ph % 2 == 0 or pw % 2 == 0:
        raise ContractViolation(f"prior must have odd height and width, got shape {p.shape}")
    ry, rx = ph // 2, pw // 2
    padded = np.pad(a, ((ry, ry), (rx, rx)))
    win = sliding_window_view(padded, (ph, pw))
    # win[i, j, u, v] = a[i + u - ry, j + v - rx]; pair it with prior[ry - (u - ry), ...]
    return np.tensordot(win, p[::-1, ::-1], axes=([2, 3], [0, 1]))


def maxpool(image, window):
    """Max-pool one (H, W, C) plane.

    Returns ``(pooled, argmax)`` where ``argmax`` has the pooled shape and holds
    the flat row-major index into ``image`` of each window's winner.
    """
    x = check_plane(image, "maxpool input")
    p = check_positive_int(window, "window")
    h, w, c = x.shape
    out, arg = maxpool_batch(x[None], p)
    out, arg = out[0], arg[0]
    ho, wo = out.shape[:2]
    oy = np.arange(ho)[:, None, None] * p + arg // p
    ox = np.arange(wo)[None, :, None] * p + arg % p
    # winners in the replicated margin map back to the edge cell they copy
    oy = np.minimum(oy, h - 1)
    ox = np.minimum(ox, w - 1)
    flat = (oy * w + ox) * c + np.arange(c)[None, None, :]
    return out, flat


def upsample_nearest(image, factor):
    """Replicate every cell into a ``factor`` x ``factor`` block."""
    x = check_plane(image, "upsample input")
    f = check_positive_int(factor, "factor")
    return np.repeat(np.repeat(x, f, axis=0), f, axis=1)


# ---------------------------------------------------------------------------
# smoothing and resampling
# ---------------------------------------------------------------------------

def gaussian_kernel1d(sigma, radius=None):
    """Normalised, exactly symmetric 1D Gaussian taps of length ``2*radius + 1``."""
    if sigma <= 0:
        raise ContractViolation(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = int(math.ceil(4.0 * sigma))
    half = np.exp(-0.5 * (np.arange(radius + 1) / sigma) ** 2)
    k = np.concatenate([half[:0:-1], half])
    return k / math.fsum(k)


def symmetric_filter1d(x, kernel, axis, mode="constant"):
    """Correlate ``x`` along ``axis`` with a symmetric odd-length kernel.

    Mirror taps are added pairwise before weighting, which makes the result
    commute bitwise with reversing ``x`` along ``axis``.
    """
    r = len(kernel) // 2
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, 0)
    n = x.shape[0]
    pad = [(r, r)] + [(0, 0)] * (x.ndim - 1)
    if mode == "constant":
        xp = np.pad(x, pad)
    elif mode == "reflect":
        # scipy-style 'reflect' (edge sample repeated); exact for any r
        xp = np.pad(x, pad, mode="symmetric") if r <= n else _reflect_pad_long(x, r)
    else:
        raise ContractViolation(f"unknown boundary mode {mode!r}")
    out = kernel[r] * xp[r:r + n]
    for j in range(1, r + 1):
        out = out + kernel[r + j] * (xp[r - j:r - j + n] + xp[r + j:r + j + n])
    return np.moveaxis(out, 0, axis)


def _reflect_pad_long(x, r):
    n = x.shape[0]
    period = np.concatenate([np.arange(n), np.arange(n)[::-1]])
    idx = period[np.arange(-r, n + r) % (2 * n)]
    return x[idx]


def gaussian_smooth(a, sigma, mode="constant"):
    """Separable Gaussian smoothing over the first two axes."""
    k = gaussian_kernel1d(sigma)
    out = symmetric_filter1d(a, k, axis=0, mode=mode)
    return symmetric_filter1d(out, k, axis=1, mode=mode)


def scaled_shape(hw, scale):
    return max(1, int(round(hw[0] * scale))), max(1, int(round(hw[1] * scale)))


def rescale(image, scale):
    """Bilinear rescale where output pixel ``u`` samples input position ``u / scale``.

    With this convention a point ``p`` in the input sits at ``p * scale`` in the
    output, exactly, for every axis.
    """
    x = check_plane(image, "rescale input")
    if scale <= 0:
        raise ContractViolation(f"scale must be positive, got {scale}")
    h, w, _ = x.shape
    oh, ow = scaled_shape((h, w), scale)
    if scale == 1.0:
        return x.copy()

    def axis(n_in, n_out):
        src = np.clip(np.arange(n_out) / scale, 0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        return lo, np.minimum(lo + 1, n_in - 1), src - lo

    y0, y1, fy = axis(h, oh)
    x0, x1, fx = axis(w, ow)
    rows = x[y0] * (1 - fy)[:, None, None] + x[y1] * fy[:, None, None]
    return rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]
