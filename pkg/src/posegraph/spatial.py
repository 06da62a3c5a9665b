"""Non-parametric spatial model over the face-shoulder-elbow-wrist chain.

Priors are learned as smoothed histograms of joint offsets in the canonical
training frame, at pixel resolution.  At inference they are resampled onto the
response-map grid and each unary map is combined with its neighbours' maps in
log space::

    log p'_i = lam * log p_i + sum_{u in N(i)} log(prior_{i|u} (*) p_u)

where ``(*)`` is a true convolution.  The face is special: instead of a
shoulder message it receives a global position prior.  Messages are a single
round computed from the unaries; there is no iteration.
"""
from dataclasses import dataclass
import json
import math
import struct

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_map
from .convnet import ResponseMap
from .dataset import FRAME_HEIGHT, FRAME_WIDTH, PART_JOINTS
from .exceptions import BadMagicError, ContractViolation, DataError, TruncatedStreamError, VersionMismatchError
from .tensor import conv2d_same_centered, gaussian_smooth, symmetric_filter1d

# chain edges stored as (child, parent); the opposite directions are 180-degree rotations
CHAIN = (("shoulder", "face"), ("elbow", "shoulder"), ("wrist", "elbow"))
# message senders per receiving part; the face gets the global prior instead
NEIGHBOURS = {"face": (), "shoulder": ("face", "elbow"), "elbow": ("shoulder", "wrist"), "wrist": ("elbow",)}


@dataclass(frozen=True)
class PairwisePrior:
    """Distribution of ``child``'s position with ``parent`` at the centre cell."""

    hist: np.ndarray
    child: str
    parent: str
    sigma: float = 0.0

    def __post_init__(self):
        h = check_map(self.hist, "prior histogram")
        if h.shape[0] % 2 == 0 or h.shape[1] % 2 == 0:
            raise ContractViolation(f"prior histogram must have odd dimensions, got {h.shape}")
        if np.any(h < 0):
            raise ContractViolation("prior histogram has negative entries")
        object.__setattr__(self, "hist", h)

    @property
    def radius(self):
        return self.hist.shape[0] // 2, self.hist.shape[1] // 2

    @property
    def key(self):
        return self.child, self.parent


@dataclass(frozen=True)
class GlobalPrior:
    """Face-position histogram over the canonical frame (rows x cols)."""

    hist: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        h = check_map(self.hist, "global prior")
        if np.any(h < 0):
            raise ContractViolation("global prior has negative entries")
        object.__setattr__(self, "hist", h)


@dataclass(frozen=True)
class SpatialConfig:
    lam: float = 1.0
    log_floor: float = 1e-6

    def __post_init__(self):
        if self.lam < 0:
            raise ContractViolation(f"lambda must be >= 0, got {self.lam}")
        if not self.log_floor > 0:
            raise ContractViolation(f"log_floor must be > 0, got {self.log_floor}")


def _normalize(h):
    total = math.fsum(h.ravel())
    if not total > 0:
        raise DataError("histogram has no mass")
    return h / total


def _joint_xy(ex, part):
    joints = ex.joints
    p = joints.get(part)
    if p is None:
        p = joints.get(PART_JOINTS.get(part, part))
    return p


def learn_pairwise_prior(examples, child, parent, grid_radius=60, sigma=3.0):
    """Smoothed, normalised histogram of ``child - parent`` pixel offsets.

    ``child``/``parent`` are part names (``"wrist"``) or joint names
    (``"lwri"``).  Offsets beyond the grid are clamped into the border bins.
    """
    offs = []
    for ex in examples:
        c, p = _joint_xy(ex, child), _joint_xy(ex, parent)
        if c is None or p is None:
            raise DataError(f"example {getattr(ex, 'source', '') or getattr(ex, 'id', '?')} "
                            f"lacks {child!r} or {parent!r}")
        offs.append((c[0] - p[0], c[1] - p[1]))
    if not offs:
        raise DataError("cannot learn a prior from zero examples")
    offs = np.asarray(offs)
    r = int(grid_radius)
    n = 2 * r + 1
    cols = np.clip(np.rint(offs[:, 0]), -r, r).astype(np.intp) + r
    rows = np.clip(np.rint(offs[:, 1]), -r, r).astype(np.intp) + r
    hist = np.zeros((n, n))
    np.add.at(hist, (rows, cols), 1.0)
    if sigma > 0:
        hist = gaussian_smooth(hist, sigma, mode="constant")
    return PairwisePrior(_normalize(hist), child, parent, float(sigma))


def rotate180(prior):
    """Reverse the offset direction: the prior of ``parent`` given ``child`` at the origin."""
    return PairwisePrior(prior.hist[::-1, ::-1].copy(), prior.parent, prior.child, prior.sigma)


def learn_face_prior(examples, frame_size=(FRAME_HEIGHT, FRAME_WIDTH), sigma=10.0):
    """Smoothed, normalised histogram of face positions over the canonical frame."""
    h, w = frame_size
    pts = [_joint_xy(ex, "face") for ex in examples]
    pts = [p for p in pts if p is not None]
    if not pts:
        raise DataError("cannot learn the face prior from zero examples")
    pts = np.asarray(pts)
    cols = np.clip(np.rint(pts[:, 0]), 0, w - 1).astype(np.intp)
    rows = np.clip(np.rint(pts[:, 1]), 0, h - 1).astype(np.intp)
    hist = np.zeros((h, w))
    np.add.at(hist, (rows, cols), 1.0)
    if sigma > 0:
        hist = gaussian_smooth(hist, sigma, mode="reflect")
    return GlobalPrior(_normalize(hist), float(sigma))


# ---------------------------------------------------------------------------
# resampling onto the response grid
# ---------------------------------------------------------------------------

def prior_to_grid(prior, stride):
    """Aggregate a pixel-resolution prior into ``stride``-pixel cells around the origin.

    Cell ``k`` collects offsets in ``[k*stride - stride/2, k*stride + stride/2]``;
    with an even stride the two boundary pixels are split half and half.  Mass
    and the centre origin are preserved.
    """
    s = int(stride)
    if s == 1:
        return prior
    hist = prior.hist

    def pool_axis(a, axis):
        r = a.shape[axis] // 2
        g = -(-(r + s // 2) // s)  # cells needed so every pixel lands somewhere
        kern = np.ones(2 * (s // 2) + 1)
        if s % 2 == 0:
            kern[0] = kern[-1] = 0.5
        pad = g * s + len(kern) // 2 - r
        widths = [(0, 0)] * a.ndim
        widths[axis] = (pad, pad)
        summed = symmetric_filter1d(np.pad(a, widths), kern, axis=axis)
        centre = summed.shape[axis] // 2
        idx = centre + s * np.arange(-g, g + 1)
        return np.take(summed, idx, axis=axis)

    out = pool_axis(pool_axis(hist, 0), 1)
    return PairwisePrior(out, prior.child, prior.parent, prior.sigma)


def face_prior_on_grid(face_prior, response, image_hw=None):
    """Sample the face prior at every cell's original-image position.

    Image coordinates are stretched onto the canonical frame; when
    ``image_hw`` is omitted the image is assumed to be frame-sized.
    """
    fh, fw = face_prior.hist.shape
    ih, iw = image_hw if image_hw is not None else (fh, fw)
    rows, cols = response.pixel_grid()
    fy = np.clip(rows * (fh / ih), 0, fh - 1)
    fx = np.clip(cols * (fw / iw), 0, fw - 1)
    y0 = np.floor(fy).astype(np.intp)
    x0 = np.floor(fx).astype(np.intp)
    y1 = np.minimum(y0 + 1, fh - 1)
    x1 = np.minimum(x0 + 1, fw - 1)
    ty, tx = fy - y0, fx - x0
    h = face_prior.hist
    return ((h[y0, x0] * (1 - tx) + h[y0, x1] * tx) * (1 - ty)
            + (h[y1, x0] * (1 - tx) + h[y1, x1] * tx) * ty)


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------

def directed_prior(priors, child, parent):
    """Prior of ``child`` given ``parent``, rotating the stored opposite direction if needed."""
    if (child, parent) in priors:
        return priors[(child, parent)]
    if (parent, child) in priors:
        return rotate180(priors[(parent, child)])
    raise ContractViolation(f"no prior relating {child!r} and {parent!r}")


def filter_responses(unaries, priors, face_prior, config=None, image_hw=None):
    """Filter the four unary maps with the chain model.

    ``unaries`` maps part name -> :class:`ResponseMap` (all on one grid).
    ``priors`` maps ``(child, parent)`` -> grid-resolution :class:`PairwisePrior`.
    ``face_prior`` is a :class:`GlobalPrior` (resampled here) or an array
    already on the unary grid.  Every map is normalised to sum 1, floored at
    ``log_floor``, combined in log space and returned renormalised.
    """
    config = config or SpatialConfig()
    parts = tuple(NEIGHBOURS)
    missing = [p for p in parts if p not in unaries]
    if missing:
        raise ContractViolation(f"missing unary maps for {missing}")
    ref = unaries[parts[0]]
    for p in parts[1:]:
        if not unaries[p].same_geometry(ref):
            raise ContractViolation(
                f"unary grid mismatch: {p} has shape {unaries[p].shape}, scale {unaries[p].scale}; "
                f"face has shape {ref.shape}, scale {ref.scale}"
            )
    floor = config.log_floor
    floored = {}
    for p in parts:
        m = unaries[p].probs
        total = m.sum()
        if not total > 0:
            raise DataError(f"unary map for {p} sums to zero")
        floored[p] = np.maximum(m / total, floor)

    if isinstance(face_prior, GlobalPrior):
        h_face = face_prior_on_grid(face_prior, ref, image_hw)
    else:
        h_face = check_map(face_prior, "face prior grid")
        if h_face.shape != ref.shape:
            raise ContractViolation(f"face prior grid {h_face.shape} does not match unary grid {ref.shape}")

    out = {}
    for p in parts:
        logp = config.lam * np.log(floored[p])
        if p == "face":
            logp = logp + np.log(np.maximum(h_face, floor))
        for u in NEIGHBOURS[p]:
            prior = directed_prior(priors, p, u)
            msg = conv2d_same_centered(floored[u], prior.hist)
            logp = logp + np.log(np.maximum(msg, floor))
        e = np.exp(logp - logp.max())
        out[p] = ref.with_probs(e / e.sum())
    return out


# ---------------------------------------------------------------------------
# bundle of learned priors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorBundle:
    """The three chain priors and the face prior, all at pixel resolution."""

    pairwise: tuple
    face: GlobalPrior
    grid_radius: int
    sigma: float

    def as_dict(self):
        return {p.key: p for p in self.pairwise}

    def grid_priors(self, stride):
        return {p.key: prior_to_grid(p, stride) for p in self.pairwise}


BUNDLE_MAGIC = b"PGPB"
BUNDLE_VERSION = 1
_BUNDLE_HEADER = struct.Struct("<4sII")


def learn_priors(examples, grid_radius=60, sigma=3.0, face_sigma=10.0,
                 frame_size=(FRAME_HEIGHT, FRAME_WIDTH)):
    examples = list(examples)
    if not examples:
        raise DataError("cannot learn priors from zero examples")
    pairwise = tuple(learn_pairwise_prior(examples, c, p, grid_radius, sigma) for c, p in CHAIN)
    face = learn_face_prior(examples, frame_size, face_sigma)
    return PriorBundle(pairwise, face, int(grid_radius), float(sigma))


def save_bundle(bundle):
    meta = {
        "grid_radius": bundle.grid_radius,
        "sigma": bundle.sigma,
        "face_sigma": bundle.face.sigma,
        "face_shape": list(bundle.face.hist.shape),
        "pairwise": [{"child": p.child, "parent": p.parent, "sigma": p.sigma,
                      "shape": list(p.hist.shape)} for p in bundle.pairwise],
    }
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    arrays = [p.hist for p in bundle.pairwise] + [bundle.face.hist]
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return _BUNDLE_HEADER.pack(BUNDLE_MAGIC, BUNDLE_VERSION, len(header)) + header + body


def load_bundle(data):
    data = bytes(data)
    if len(data) < _BUNDLE_HEADER.size:
        raise TruncatedStreamError("prior bundle shorter than its header")
    magic, version, hlen = _BUNDLE_HEADER.unpack_from(data)
    if magic != BUNDLE_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {BUNDLE_MAGIC!r}")
    if version != BUNDLE_VERSION:
        raise VersionMismatchError(f"prior bundle version {version} is not supported")
    start = _BUNDLE_HEADER.size
    meta = json.loads(data[start:start + hlen].decode("utf-8"))
    flat = data[start + hlen:]
    shapes = [tuple(p["shape"]) for p in meta["pairwise"]] + [tuple(meta["face_shape"])]
    need = sum(int(np.prod(s)) for s in shapes) * 8
    if len(flat) != need:
        raise TruncatedStreamError(f"prior bundle payload has {len(flat)} bytes, expected {need}")
    arrays, pos = [], 0
    for s in shapes:
        n = int(np.prod(s)) * 8
        arrays.append(np.frombuffer(flat[pos:pos + n], dtype="<f8").reshape(s).astype(np.float64))
        pos += n
    pairwise = tuple(PairwisePrior(a, p["child"], p["parent"], p["sigma"])
                     for a, p in zip(arrays, meta["pairwise"]))
    face = GlobalPrior(arrays[-1], meta["face_sigma"])
    return PriorBundle(pairwise, face, meta["grid_radius"], meta["sigma"])


class SpatialModel(BaseEstimator):
    """Estimator wrapper: ``fit`` learns the priors, ``transform`` filters unary maps.

    Parameters
    ----------
    lam : float
        Exponent on each joint's own unary map.
    log_floor : float
        Probability floor applied before taking logs.
    grid_radius : int
        Half-size in pixels of the pairwise prior histograms.
    sigma : float
        Gaussian smoothing of the pairwise priors, pixels.
    face_sigma : float
        Gaussian smoothing of the face position prior, pixels.
    """

    def __init__(self, lam=1.0, log_floor=1e-6, grid_radius=60, sigma=3.0, face_sigma=10.0):
        self.lam = lam
        self.log_floor = log_floor
        self.grid_radius = grid_radius
        self.sigma = sigma
        self.face_sigma = face_sigma

    def fit(self, examples, y=None):
        self.bundle_ = learn_priors(examples, self.grid_radius, self.sigma, self.face_sigma)
        return self

    @classmethod
    def from_bundle(cls, bundle, **kwargs):
        model = cls(grid_radius=bundle.grid_radius, sigma=bundle.sigma,
                    face_sigma=bundle.face.sigma, **kwargs)
        model.bundle_ = bundle
        return model

    def transform(self, unaries, image_hw=None):
        check_is_fitted(self, "bundle_")
        stride = next(iter(unaries.values())).stride
        return filter_responses(unaries, self.bundle_.grid_priors(stride), self.bundle_.face,
                                SpatialConfig(self.lam, self.log_floor), image_hw)
