"""Test-time pipeline: scale pyramid, dense responses, spatial filtering, peak picking."""
from dataclasses import dataclass
import logging
import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_plane
from .convnet import forward_full
from .dataset import PARTS
from .exceptions import ConfigError, ContractViolation, DataError
from .preprocessing import lcn
from .spatial import SpatialConfig, filter_responses
from .tensor import rescale, scaled_shape

logger = logging.getLogger(__name__)

# geometric, ratio 1.15, bracketing 0.94x
DEFAULT_SCALES = (1.25, 1.087, 0.945, 0.822, 0.715, 0.621)


@dataclass(frozen=True)
class ScaleConfig:
    scales: tuple = DEFAULT_SCALES

    def __post_init__(self):
        s = tuple(float(v) for v in self.scales)
        if not s:
            raise ConfigError("at least one scale is required")
        if any(v <= 0 for v in s):
            raise ConfigError(f"scales must be positive, got {s}")
        if any(a <= b for a, b in zip(s, s[1:])):
            raise ConfigError(f"scales must be strictly decreasing, got {s}")
        object.__setattr__(self, "scales", s)


@dataclass(frozen=True)
class NmsConfig:
    window_radius: float = 20.0
    top_n: int = 1

    def __post_init__(self):
        if self.window_radius < 1:
            raise ConfigError(f"window_radius must be >= 1, got {self.window_radius}")
        if int(self.top_n) != self.top_n or self.top_n < 1:
            raise ConfigError(f"top_n must be an integer >= 1, got {self.top_n}")


@dataclass(frozen=True)
class Detection:
    joint: str
    x: float
    y: float
    confidence: float
    scale: float


def build_pyramid(image, config=None, patch_size=64):
    """Rescaled, LCN-processed copies of ``image``; levels smaller than a patch are dropped."""
    config = config or ScaleConfig()
    x = check_plane(image, "image", channels=3)
    levels = []
    for s in config.scales:
        h, w = scaled_shape(x.shape[:2], s)
        if h < patch_size or w < patch_size:
            logger.warning("dropping scale %.3f: %dx%d is smaller than a %d px patch", s, h, w, patch_size)
            continue
        levels.append((lcn(rescale(x, s)), s))
    if not levels:
        raise ContractViolation(
            f"image of size {x.shape[0]}x{x.shape[1]} is smaller than a {patch_size} px patch at every scale"
        )
    return levels


def argmax_cell(probs):
    """(row, col) of the maximum; the lowest row-major index wins ties."""
    k = int(np.argmax(probs))
    return divmod(k, probs.shape[1])


def peak_detection(joint, rmap):
    r, c = argmax_cell(rmap.probs)
    py, px = rmap.cell_to_pixel(r, c)
    return Detection(joint, float(px), float(py), float(rmap.probs[r, c]), rmap.scale)


def nms_peaks(rmap, config=None, joint=""):
    """Greedy peak extraction with suppression radius in original-image pixels."""
    config = config or NmsConfig()
    vals = rmap.probs.ravel().copy()
    rows, cols = rmap.pixel_grid()
    rows, cols = rows.ravel(), cols.ravel()
    alive = np.ones(vals.shape, dtype=bool)
    out = []
    while len(out) < config.top_n:
        masked = np.where(alive, vals, -np.inf)
        k = int(np.argmax(masked))
        if not alive[k] or vals[k] <= 0:
            break
        out.append(Detection(joint, float(cols[k]), float(rows[k]), float(vals[k]), rmap.scale))
        alive &= np.hypot(rows - rows[k], cols - cols[k]) > config.window_radius
    return out


def scale_responses(image, part_params, bundle=None, scale_config=None, spatial_config=None):
    """Per-scale unary and (optionally) filtered response maps.

    Returns a list of ``(scale, unaries, filtered)``; ``filtered`` is ``None``
    when ``bundle`` is ``None``.
    """
    missing = [p for p in PARTS if p not in part_params]
    if missing:
        raise ContractViolation(f"no detector parameters for {missing}")
    x = check_plane(image, "image", channels=3)
    patch = part_params[PARTS[0]].arch.patch_size
    out = []
    grid_priors = None
    for level, s in build_pyramid(x, scale_config, patch):
        unaries = {p: forward_full(part_params[p], level, s) for p in PARTS}
        filtered = None
        if bundle is not None:
            stride = unaries[PARTS[0]].stride
            if grid_priors is None:
                grid_priors = bundle.grid_priors(stride)
            filtered = filter_responses(unaries, grid_priors, bundle.face,
                                        spatial_config or SpatialConfig(), x.shape[:2])
        out.append((s, unaries, filtered))
    return out


SELECTION_RULES = ("filtered", "evidence", "person")
DEFAULT_SELECTION = "person"


def _unary_score(rmap, r, c):
    if rmap.logits is not None:
        return float(rmap.logits[r, c])
    p = min(max(float(rmap.probs[r, c]), 1e-300), 1.0 - 1e-16)
    return math.log(p) - math.log1p(-p)


def select_across_scales(per_scale, use_filtered=True, rule="filtered"):
    """Per part, one detection chosen over the scales in ``per_scale``.

    Within a scale the location is the argmax of the filtered map (or of the
    raw map when ``use_filtered`` is false).  Scales are then compared by:

    ``"filtered"``
        the probability at that cell in the compared map;
    ``"evidence"``
        the raw detector logit at that cell, per part;
    ``"person"``
        the summed raw logits of all parts, so every part comes from one scale.

    The first scale wins ties.
    """
    if rule not in SELECTION_RULES:
        raise ConfigError(f"unknown selection rule {rule!r}; expected one of {SELECTION_RULES}")
    candidates = []
    for s, unaries, filtered in per_scale:
        maps = filtered if use_filtered and filtered is not None else unaries
        level = {}
        for p in PARTS:
            r, c = argmax_cell(maps[p].probs)
            py, px = maps[p].cell_to_pixel(r, c)
            if rule == "filtered":
                conf = float(maps[p].probs[r, c])
            else:
                conf = _unary_score(unaries[p], r, c)
            level[p] = Detection(p, float(px), float(py), conf, maps[p].scale)
        candidates.append(level)
    if rule == "person":
        totals = [sum(level[p].confidence for p in PARTS) for level in candidates]
        return dict(candidates[int(np.argmax(totals))])
    best = {}
    for level in candidates:
        for p in PARTS:
            if p not in best or level[p].confidence > best[p].confidence:
                best[p] = level[p]
    return best


def detect(image, part_params, bundle=None, scale_config=None, spatial_config=None,
           selection=DEFAULT_SELECTION):
    """Single-person detection: one :class:`Detection` per part.

    Without a prior bundle the raw detector responses are used (unary-only).
    ``selection`` names the cross-scale rule of :func:`select_across_scales`.
    """
    per_scale = scale_responses(image, part_params, bundle, scale_config, spatial_config)
    return select_across_scales(per_scale, use_filtered=bundle is not None, rule=selection)


def detect_multi(image, part_params, bundle=None, scale_config=None, spatial_config=None,
                 nms_config=None):
    """Multi-person variant: NMS on each scale's maps, then greedy merging across scales."""
    nms_config = nms_config or NmsConfig()
    per_scale = scale_responses(image, part_params, bundle, scale_config, spatial_config)
    result = {}
    for p in PARTS:
        cands = []
        for s, unaries, filtered in per_scale:
            maps = filtered if bundle is not None else unaries
            cands.extend(nms_peaks(maps[p], nms_config, p))
        cands.sort(key=lambda d: -d.confidence)
        kept = []
        for d in cands:
            if all(math.hypot(d.x - k.x, d.y - k.y) > nms_config.window_radius for k in kept):
                kept.append(d)
            if len(kept) == nms_config.top_n:
                break
        result[p] = kept
    return result


# ---------------------------------------------------------------------------
# detection files
# ---------------------------------------------------------------------------

DETECTIONS_HEADER = "posegraph-detections v1"


def format_detections(records):
    """``records`` is an iterable of ``(image_path, Detection)``."""
    lines = [DETECTIONS_HEADER]
    for path, d in records:
        lines.append(",".join([path, d.joint, repr(d.x), repr(d.y), repr(d.confidence), repr(d.scale)]))
    return "\n".join(lines) + "\n"


def parse_detections(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != DETECTIONS_HEADER:
        raise DataError(f"line 1: expected header {DETECTIONS_HEADER!r}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        toks = line.split(",")
        if len(toks) != 6:
            raise DataError(f"line {lineno}: expected 6 fields, got {len(toks)}")
        try:
            x, y, conf, s = (float(t) for t in toks[2:])
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric detection field") from None
        out.append((toks[0], Detection(toks[1], x, y, conf, s)))
    return out


class PoseDetector(BaseEstimator):
    """Detectors for the four parts plus an optional spatial model, as one estimator.

    ``fit`` expects already-fitted :class:`~posegraph.detector.PartDetector`
    objects keyed by part and a fitted :class:`~posegraph.spatial.SpatialModel`
    (or ``None`` for unary-only detection); ``predict`` maps images to
    per-part detections.
    """

    def __init__(self, detectors=None, spatial_model=None, scales=DEFAULT_SCALES,
                 selection=DEFAULT_SELECTION):
        self.detectors = detectors
        self.spatial_model = spatial_model
        self.scales = scales
        self.selection = selection

    def fit(self, X=None, y=None):
        if not self.detectors or any(p not in self.detectors for p in PARTS):
            raise ContractViolation(f"detectors for all of {PARTS} are required")
        self.part_params_ = {p: self.detectors[p].params_ for p in PARTS}
        self.bundle_ = None
        self.spatial_config_ = SpatialConfig()
        if self.spatial_model is not None:
            self.bundle_ = self.spatial_model.bundle_
            self.spatial_config_ = SpatialConfig(self.spatial_model.lam, self.spatial_model.log_floor)
        return self

    def predict(self, X):
        check_is_fitted(self, "part_params_")
        cfg = ScaleConfig(self.scales)
        return [detect(img, self.part_params_, self.bundle_, cfg, self.spatial_config_, self.selection)
                for img in X]
