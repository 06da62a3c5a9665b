"""Part-detector convolutional network: forward, backward, fully-convolutional mode.

The network maps an LCN-processed ``patch_size`` x ``patch_size`` RGB window to
the probability that a given joint sits at the window centre:

    3 x [valid conv -> ReLU -> (2x2 max-pool on the first two stages)]
    -> fc -> ReLU -> fc -> ReLU -> fc -> logistic

Arrays are NHWC float64.  The fully-connected stages read the last conv
stage's output flattened in (h, w, c) order, which is what lets
:func:`forward_full` re-express them as convolutions over a whole image.
"""
from dataclasses import dataclass, field, asdict
import json
import struct

import numpy as np
from scipy.special import expit, log_expit

from ._validation import check_plane, check_random_state
from .exceptions import (
    ArchitectureMismatchError,
    BadMagicError,
    ContractViolation,
    TruncatedStreamError,
    VersionMismatchError,
)
from .tensor import (
    col2im,
    conv2d_valid_batch,
    kernel_from_matrix,
    kernel_matrix,
    maxpool_backward,
    maxpool_batch,
)


@dataclass(frozen=True)
class Architecture:
    """Layer geometry of a part detector.

    The defaults are declared choices (the source architecture's exact widths
    were never published): 16/32/64 maps of 5x5 filters, fc widths 512/256/1.
    """

    patch_size: int = 64
    in_channels: int = 3
    conv_maps: tuple = (16, 32, 64)
    conv_sizes: tuple = (5, 5, 5)
    pools: tuple = (2, 2, 1)
    fc_sizes: tuple = (512, 256, 1)

    def __post_init__(self):
        for name in ("conv_maps", "conv_sizes", "pools", "fc_sizes"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not (len(self.conv_maps) == len(self.conv_sizes) == len(self.pools) == 3):
            raise ContractViolation("architecture needs exactly three conv stages")
        if self.pools != (2, 2, 1):
            raise ContractViolation(f"pooling must be (2, 2, 1), got {self.pools}")
        if len(self.fc_sizes) != 3 or self.fc_sizes[-1] != 1:
            raise ContractViolation(f"need three fc stages ending in one unit, got {self.fc_sizes}")
        if min(self.conv_maps + self.conv_sizes + self.fc_sizes) < 1 or self.in_channels < 1:
            raise ContractViolation("all layer sizes must be positive")
        self.stage_sides()

    @classmethod
    def reduced(cls):
        """Tiny 8x8 variant with two maps per layer, used for gradient checks."""
        return cls(patch_size=8, conv_maps=(2, 2, 2), conv_sizes=(3, 2, 1), fc_sizes=(2, 2, 1))

    @property
    def stride(self):
        return int(np.prod(self.pools))

    def stage_sides(self):
        """Spatial side after each conv stage (post-pooling), checked for exact divisibility."""
        side = self.patch_size
        sides = []
        for k, p in zip(self.conv_sizes, self.pools):
            side = side - k + 1
            if side < 1 or side % p:
                raise ContractViolation(
                    f"patch size {self.patch_size} does not chain through conv {k} / pool {p} "
                    f"(side {side})"
                )
            side //= p
            sides.append(side)
        return sides

    @property
    def feature_side(self):
        """Side of the last conv map for one patch; the footprint of fc1 as a convolution."""
        return self.stage_sides()[-1]

    @property
    def center_offset(self):
        """Pixel offset of a window's centre from its top-left corner."""
        return (self.patch_size - 1) / 2.0

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class NetworkParams:
    """All weights of one part detector.

    ``conv`` holds three ``(weights (out, in, kh, kw), bias)`` pairs and ``fc``
    three ``(weights (out, in), bias)`` pairs.
    """

    arch: Architecture
    conv: tuple
    fc: tuple

    def __post_init__(self):
        conv = tuple((np.asarray(w, np.float64), np.asarray(b, np.float64)) for w, b in self.conv)
        fc = tuple((np.asarray(w, np.float64), np.asarray(b, np.float64)) for w, b in self.fc)
        object.__setattr__(self, "conv", conv)
        object.__setattr__(self, "fc", fc)
        expected = param_shapes(self.arch)
        got = [a.shape for a in self.arrays()]
        if got != expected:
            raise ContractViolation(f"parameter shapes {got} do not match architecture {expected}")

    def arrays(self):
        """Flat list of parameter arrays in canonical order (w, b per layer)."""
        out = []
        for w, b in self.conv + self.fc:
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arch, arrays):
        arrays = list(arrays)
        pairs = [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
        return cls(arch, tuple(pairs[:3]), tuple(pairs[3:]))


PARAM_NAMES = tuple(
    f"{layer}.{kind}"
    for layer in ("conv1", "conv2", "conv3", "fc1", "fc2", "fc3")
    for kind in ("weight", "bias")
)


def param_shapes(arch):
    shapes = []
    cin = arch.in_channels
    for m, k in zip(arch.conv_maps, arch.conv_sizes):
        shapes += [(m, cin, k, k), (m,)]
        cin = m
    fin = arch.feature_side ** 2 * cin
    for fout in arch.fc_sizes:
        shapes += [(fout, fin), (fout,)]
        fin = fout
    return shapes


def init_params(rng=None, arch=None):
    """Glorot-uniform weights, zero biases; deterministic for a given seed."""
    arch = arch or Architecture()
    rng = check_random_state(rng)
    arrays = []
    for shape in param_shapes(arch):
        if len(shape) == 1:
            arrays.append(np.zeros(shape))
            continue
        if len(shape) == 4:
            m, c, kh, kw = shape
            fan_in, fan_out = c * kh * kw, m * kh * kw
        else:
            fan_out, fan_in = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays.append(rng.uniform(-limit, limit, size=shape))
    return NetworkParams.from_arrays(arch, arrays)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Cached activations of one mini-batch, consumed by :func:`backward`."""

    arch: Architecture
    input_shape: tuple
    conv_cols: list = field(default_factory=list)
    conv_in_shapes: list = field(default_factory=list)
    conv_pre: list = field(default_factory=list)
    pool_args: list = field(default_factory=list)
    fc_inputs: list = field(default_factory=list)
    dropout_masks: list = field(default_factory=list)
    fc_pre: list = field(default_factory=list)
    logits: np.ndarray = None

    @property
    def probs(self):
        return expit(self.logits)


def _check_batch(params, x):
    a = params.arch
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    want = (a.patch_size, a.patch_size, a.in_channels)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ContractViolation(f"patch batch must have shape (N, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractViolation("patches contain NaN or Inf")
    return x


def forward_batch(params, patches, dropout=None):
    """Run the network on an (N, P, P, C) batch.

    ``dropout`` is an optional callable ``activations -> (masked, mask)`` applied
    to the input of every fully-connected stage.  Returns ``(probs, trace)``.
    """
    x = _check_batch(params, patches)
    a = params.arch
    trace = ForwardTrace(arch=a, input_shape=x.shape)
    h = x
    for (w, b), pool in zip(params.conv, a.pools):
        trace.conv_in_shapes.append(h.shape)
        z, cols = conv2d_valid_batch(h, w, b)
        trace.conv_cols.append(cols)
        trace.conv_pre.append(z)
        h = np.maximum(z, 0.0)
        if pool > 1:
            h, arg = maxpool_batch(h, pool)
            trace.pool_args.append(arg)
        else:
            trace.pool_args.append(None)
    h = h.reshape(h.shape[0], -1)
    last = len(params.fc) - 1
    for j, (w, b) in enumerate(params.fc):
        mask = None
        if dropout is not None:
            h, mask = dropout(h)
        trace.fc_inputs.append(h)
        trace.dropout_masks.append(mask)
        z = h @ w.T + b
        trace.fc_pre.append(z)
        h = np.maximum(z, 0.0) if j < last else z
    trace.logits = h[:, 0]
    return expit(trace.logits), trace


def forward_patch(params, patch):
    """Probability for one LCN-processed patch, plus its trace."""
    x = check_plane(patch, "patch")
    probs, trace = forward_batch(params, x[None])
    return float(probs[0]), trace


def predict_logits(params, patches, batch_size=256):
    """Inference-only logits for a large patch array, processed in chunks."""
    x = np.asarray(patches, dtype=np.float64)
    out = [forward_batch(params, x[i:i + batch_size])[1].logits for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def bce_loss(logits, targets):
    """Summed binary cross-entropy between logistic outputs and 0/1 targets."""
    t = np.asarray(targets, dtype=np.float64)
    return float(-np.sum(t * log_expit(logits) + (1 - t) * log_expit(-logits)))


def backward(params, trace, target):
    """Gradients of the summed cross-entropy loss w.r.t. every parameter.

    Returns arrays in :attr:`NetworkParams.arrays` order.
    """
    if trace.arch != params.arch or trace.logits is None:
        raise ContractViolation("trace was not produced by a forward pass of this architecture")
    for (w, _), cols in zip(params.conv, trace.conv_cols):
        if cols.shape[1] != w[0].size:
            raise ContractViolation(f"trace column width {cols.shape[1]} does not match weights {w.shape}")
    n = trace.logits.shape[0]
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), (n,))
    grads = [None] * (2 * (len(params.conv) + len(params.fc)))

    d = (expit(trace.logits) - t)[:, None]
    for j in range(len(params.fc) - 1, -1, -1):
        w, _ = params.fc[j]
        if j < len(params.fc) - 1:
            d = d * (trace.fc_pre[j] > 0)
        gi = 2 * (len(params.conv) + j)
        grads[gi] = d.T @ trace.fc_inputs[j]
        grads[gi + 1] = d.sum(axis=0)
        d = d @ w
        if trace.dropout_masks[j] is not None:
            d = d * trace.dropout_masks[j]

    last_pre = trace.conv_pre[-1]
    pooled_shape = last_pre.shape if trace.pool_args[-1] is None else None
    if pooled_shape is None:
        raise ContractViolation("last conv stage must not pool")
    d = d.reshape(pooled_shape)
    for i in range(len(params.conv) - 1, -1, -1):
        w, _ = params.conv[i]
        pool = params.arch.pools[i]
        if pool > 1:
            d = maxpool_backward(d, trace.pool_args[i], trace.conv_pre[i].shape, pool)
        d = d * (trace.conv_pre[i] > 0)
        m = w.shape[0]
        dmat = d.reshape(-1, m)
        grads[2 * i] = kernel_from_matrix(dmat.T @ trace.conv_cols[i], w.shape)
        grads[2 * i + 1] = dmat.sum(axis=0)
        if i > 0:
            dcols = dmat @ kernel_matrix(w)
            d = col2im(dcols, trace.conv_in_shapes[i], w.shape[2], w.shape[3])
    return grads


# ---------------------------------------------------------------------------
# full-image (fully convolutional) evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResponseMap:
    """Per-cell detector probabilities for one image at one scale.

    Cell ``(r, c)`` is centred on scaled-image pixel
    ``(origin_offset[0] + r * stride, origin_offset[1] + c * stride)``, which
    divided by ``scale`` gives original-image pixels.
    """

    probs: np.ndarray
    scale: float = 1.0
    origin_offset: tuple = (31.5, 31.5)
    stride: int = 4
    # raw detector logits when the map comes straight from the network
    logits: np.ndarray = None

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim == 3 and p.shape[2] == 1:
            p = p[:, :, 0]
        if p.ndim != 2:
            raise ContractViolation(f"response map must be 2D, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ContractViolation("response map contains NaN or Inf")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "origin_offset", tuple(float(v) for v in self.origin_offset))

    @property
    def shape(self):
        return self.probs.shape

    def cell_to_pixel(self, r, c):
        """(row, col) in original-image pixels of grid cell (r, c)."""
        oy, ox = self.origin_offset
        return ((oy + np.asarray(r) * self.stride) / self.scale,
                (ox + np.asarray(c) * self.stride) / self.scale)

    def pixel_grid(self):
        """Arrays (rows, cols) of original-image pixel coordinates for every cell."""
        rr, cc = np.indices(self.probs.shape)
        return self.cell_to_pixel(rr, cc)

    def same_geometry(self, other):
        return (self.probs.shape == other.probs.shape and self.scale == other.scale
                and self.origin_offset == other.origin_offset and self.stride == other.stride)

    def with_probs(self, probs):
        return ResponseMap(probs, self.scale, self.origin_offset, self.stride)


def response_grid_shape(arch, height, width):
    s = arch.stride
    return (height - arch.patch_size) // s + 1, (width - arch.patch_size) // s + 1


def full_logits(params, image):
    """Logit grid of every stride-aligned window of an LCN-processed image."""
    a = params.arch
    x = check_plane(image, "forward_full image", channels=a.in_channels,
                    min_hw=(a.patch_size, a.patch_size))
    gh, gw = response_grid_shape(a, x.shape[0], x.shape[1])
    s = a.stride
    h = x[None, :a.patch_size + s * (gh - 1), :a.patch_size + s * (gw - 1)]
    for (w, b), pool in zip(params.conv, a.pools):
        h, _ = conv2d_valid_batch(h, w, b)
        np.maximum(h, 0.0, out=h)
        if pool > 1:
            h, _ = maxpool_batch(h, pool)
    k = a.feature_side
    w1, b1 = params.fc[0]
    kern = w1.reshape(w1.shape[0], k, k, -1).transpose(0, 3, 1, 2)
    h, _ = conv2d_valid_batch(h, kern, b1)
    h = h[0]
    for j, (w, b) in enumerate(params.fc[1:], start=1):
        h = np.maximum(h, 0.0)
        h = h @ w.T + b
    return h[:, :, 0]


def forward_full(params, image, scale=1.0):
    """Apply the detector densely over an LCN-processed image.

    Cell ``(r, c)`` equals :func:`forward_patch` on the window whose top-left
    corner is ``(stride*r, stride*c)``.
    """
    logits = full_logits(params, image)
    c = params.arch.center_offset
    return ResponseMap(expit(logits), float(scale), (c, c), params.arch.stride, logits)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PGNC"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sII")


def save_checkpoint(params):
    """Serialise params: magic, version, JSON architecture header, little-endian doubles."""
    header = json.dumps(params.arch.to_dict(), sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    return _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)) + header + body


def load_checkpoint(data, expected_arch=None):
    """Inverse of :func:`save_checkpoint`.

    Raises a distinct :class:`CheckpointError` subclass for bad magic, unknown
    version, truncated payload, or an architecture differing from ``expected_arch``.
    """
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise TruncatedStreamError(f"checkpoint is {len(data)} bytes, shorter than its header")
    magic, version, hlen = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    start = _HEADER.size
    if len(data) < start + hlen:
        raise TruncatedStreamError("checkpoint truncated inside the architecture header")
    try:
        arch = Architecture.from_dict(json.loads(data[start:start + hlen].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise ArchitectureMismatchError(f"unreadable architecture header: {exc}") from exc
    if expected_arch is not None and arch != expected_arch:
        raise ArchitectureMismatchError(f"checkpoint architecture {arch} differs from expected {expected_arch}")
    shapes = param_shapes(arch)
    need = sum(int(np.prod(s)) for s in shapes) * 8
    body = data[start + hlen:]
    if len(body) < need:
        raise TruncatedStreamError(f"checkpoint payload has {len(body)} bytes, expected {need}")
    if len(body) > need:
        raise TruncatedStreamError(f"checkpoint has {len(body) - need} trailing bytes")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    arrays, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(flat[pos:pos + n].reshape(s).copy())
        pos += n
    return NetworkParams.from_arrays(arch, arrays)
