"""Annotations, training-frame normalisation, mirroring, patch sampling, synthetic data.

Coordinates are ``(x, y)`` pixels with ``x`` along image columns.  Training
images are brought into a canonical 320x240 frame: scaled so the head box is
:data:`CANONICAL_HEAD_HEIGHT` pixels tall, then translated so the midpoint of
the two shoulders lands on :data:`SHOULDER_ANCHOR`.  Test images are never
normalised; the scale pyramid covers their size variation instead.
"""
from dataclasses import dataclass, field, replace
import logging
import math
import os

import numpy as np
from PIL import Image

from ._validation import check_plane, check_random_state
from .exceptions import ConfigError, ContractViolation, DataError
from .preprocessing import lcn

logger = logging.getLogger(__name__)

JOINTS = ("face", "lsho", "lelb", "lwri", "rsho", "relb", "rwri")
MIRROR_PAIRS = {"face": "face", "lsho": "rsho", "lelb": "relb", "lwri": "rwri",
                "rsho": "lsho", "relb": "lelb", "rwri": "lwri"}
# detector name -> annotated joint (the left chain is modelled; right via mirroring)
PART_JOINTS = {"face": "face", "shoulder": "lsho", "elbow": "lelb", "wrist": "lwri"}
PARTS = tuple(PART_JOINTS)

FRAME_WIDTH = 320
FRAME_HEIGHT = 240
SHOULDER_ANCHOR = (160.0, 80.0)
CANONICAL_HEAD_HEIGHT = 50.0

ANNOTATION_HEADER = "posegraph-annotations v1"
SPLITS = ("train", "test")


@dataclass(frozen=True)
class PoseExample:
    """One annotated image: joint pixel coordinates and a head bounding box.

    ``joints`` maps every name in :data:`JOINTS` to ``(x, y)`` or ``None`` when
    the joint is not annotated.
    """

    image_path: str
    joints: dict
    head_box: tuple
    split: str = "train"

    @property
    def id(self):
        return self.image_path

    def joint(self, name):
        return self.joints.get(name)


@dataclass
class NormalizedExample:
    """A training example mapped into the canonical frame.

    ``offset`` is the translation of the similarity transform, so a source point
    ``p`` lands at ``scale * p + offset``.
    """

    image: np.ndarray
    joints: dict
    scale: float
    offset: tuple
    source: str = ""

    def __eq__(self, other):
        if not isinstance(other, NormalizedExample):
            return NotImplemented
        return (np.array_equal(self.image, other.image) and self.joints == other.joints
                and self.scale == other.scale and self.offset == other.offset
                and self.source == other.source)


@dataclass
class PatchSample:
    patch: np.ndarray
    label: int
    joint: str
    source: str
    center: tuple = (0.0, 0.0)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def read_image(path):
    """8-bit PNG/PPM (or anything Pillow reads) as an RGB float plane in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def write_image(path, image):
    x = check_plane(image, "image", channels=3)
    data = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, "RGB").save(path)


def image_size(path):
    """(width, height) read from the file header only."""
    try:
        with Image.open(path) as im:
            return im.size
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def warp_similarity(image, scale, offset, out_hw):
    """Sample ``image`` under ``p' = scale * p + offset`` into an ``out_hw`` canvas.

    Bilinear interpolation; canvas pixels whose source lies outside the image
    are zero.
    """
    x = check_plane(image, "image")
    h, w, _ = x.shape
    oh, ow = out_hw
    sy = (np.arange(oh) - offset[1]) / scale
    sx = (np.arange(ow) - offset[0]) / scale
    vy = (sy >= 0) & (sy <= h - 1)
    vx = (sx >= 0) & (sx <= w - 1)
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]
    rows0, rows1 = x[y0], x[y1]
    top = rows0[:, x0] * (1 - fx) + rows0[:, x1] * fx
    bot = rows1[:, x0] * (1 - fx) + rows1[:, x1] * fx
    out = top * (1 - fy) + bot * fy
    out *= (vy[:, None] & vx[None, :])[:, :, None]
    return out


# ---------------------------------------------------------------------------
# annotation file
# ---------------------------------------------------------------------------

def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def format_record(ex):
    if "," in ex.image_path or "\n" in ex.image_path:
        raise DataError(f"image path {ex.image_path!r} may not contain commas or newlines")
    fields = [ex.image_path, ex.split] + [_fmt(v) for v in ex.head_box]
    for j in JOINTS:
        p = ex.joints.get(j)
        fields += ["nan", "nan"] if p is None else [_fmt(p[0]), _fmt(p[1])]
    return ",".join(fields)


def save_annotations(examples, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(ANNOTATION_HEADER + "\n")
        for ex in examples:
            f.write(format_record(ex) + "\n")


def _parse_float(tok, lineno, name):
    try:
        return float(tok)
    except ValueError:
        raise DataError(f"line {lineno}: field {name!r} is not a number: {tok!r}") from None


def parse_record(line, lineno=0):
    toks = line.rstrip("\n").split(",")
    want = 2 + 4 + 2 * len(JOINTS)
    if len(toks) != want:
        raise DataError(f"line {lineno}: expected {want} comma-separated fields, got {len(toks)}")
    path, split = toks[0], toks[1]
    if not path:
        raise DataError(f"line {lineno}: field 'imagePath' is empty")
    if split not in SPLITS:
        raise DataError(f"line {lineno}: field 'split' must be one of {SPLITS}, got {split!r}")
    box = tuple(_parse_float(t, lineno, f"headBox.{k}") for t, k in zip(toks[2:6], "xywh"))
    joints = {}
    for i, j in enumerate(JOINTS):
        x = _parse_float(toks[6 + 2 * i], lineno, f"{j}.x")
        y = _parse_float(toks[7 + 2 * i], lineno, f"{j}.y")
        if math.isnan(x) != math.isnan(y):
            raise DataError(f"line {lineno}: joint {j!r} has only one coordinate missing")
        joints[j] = None if math.isnan(x) else (x, y)
    return PoseExample(path, joints, box, split)


def validate_example(ex, size=None, lineno=0):
    """Check joint names, head box area and (if ``size`` is given) image bounds."""
    unknown = set(ex.joints) - set(JOINTS)
    if unknown:
        raise DataError(f"line {lineno}: unknown joint name(s) {sorted(unknown)}")
    bx, by, bw, bh = ex.head_box
    if not (bw > 0 and bh > 0) or any(math.isnan(v) for v in ex.head_box):
        raise DataError(f"line {lineno}: headBox must have positive area, got {ex.head_box}")
    if size is not None:
        w, h = size
        for j, p in ex.joints.items():
            if p is None:
                continue
            if not (0 <= p[0] <= w - 1 and 0 <= p[1] <= h - 1):
                raise DataError(
                    f"line {lineno}: joint {j!r} at {p} is outside the {w}x{h} image bounds"
                )


def load_annotations(path, image_root=None, check_images=True):
    """Parse an annotation file, validating every record.

    Image paths are resolved relative to ``image_root`` (default: the
    annotation file's directory) and their sizes read to bounds-check joints.
    """
    root = image_root if image_root is not None else os.path.dirname(os.path.abspath(path))
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as exc:
        raise DataError(f"cannot read annotations {path}: {exc}") from exc
    if not lines or lines[0].strip() != ANNOTATION_HEADER:
        got = lines[0].strip() if lines else "<empty file>"
        raise DataError(f"line 1: unrecognised header {got!r}, expected {ANNOTATION_HEADER!r}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        ex = parse_record(line, lineno)
        size = image_size(resolve_path(ex.image_path, root)) if check_images else None
        validate_example(ex, size, lineno)
        out.append(ex)
    return out


def resolve_path(image_path, root):
    return image_path if os.path.isabs(image_path) else os.path.join(root, image_path)


# ---------------------------------------------------------------------------
# normalisation and mirroring
# ---------------------------------------------------------------------------

def normalization_transform(ex, head_height=CANONICAL_HEAD_HEIGHT, anchor=SHOULDER_ANCHOR):
    """(scale, offset) mapping source pixels into the canonical frame."""
    bh = ex.head_box[3]
    if not bh > 0 or not ex.head_box[2] > 0:
        raise DataError(f"{ex.id}: degenerate head box {ex.head_box}")
    ls, rs = ex.joints.get("lsho"), ex.joints.get("rsho")
    if ls is None or rs is None:
        raise DataError(f"{ex.id}: both shoulders must be annotated to normalise")
    s = head_height / bh
    mx, my = (ls[0] + rs[0]) / 2.0, (ls[1] + rs[1]) / 2.0
    return s, (anchor[0] - s * mx, anchor[1] - s * my)


def normalize_example(ex, image=None, image_root="."):
    """Scale by head-box height and crop to 320x240 with the shoulders anchored."""
    s, (tx, ty) = normalization_transform(ex)
    if image is None:
        image = read_image(resolve_path(ex.image_path, image_root))
    frame = warp_similarity(image, s, (tx, ty), (FRAME_HEIGHT, FRAME_WIDTH))
    joints = {j: None if p is None else (s * p[0] + tx, s * p[1] + ty) for j, p in ex.joints.items()}
    return NormalizedExample(frame, joints, s, (tx, ty), ex.id)


def denormalize_joints(nex):
    """Map a normalised example's joints back into source-image pixels."""
    s, (tx, ty) = nex.scale, nex.offset
    return {j: None if p is None else ((p[0] - tx) / s, (p[1] - ty) / s) for j, p in nex.joints.items()}


def mirror_example(ex):
    """Flip about the vertical axis and swap left/right joint labels.

    ``x -> width - 1 - x``; this is an exact involution whenever coordinates
    are exactly representable after the subtraction (e.g. dyadic fractions).
    """
    w = ex.image.shape[1]
    joints = {}
    for j, p in ex.joints.items():
        joints[MIRROR_PAIRS[j]] = None if p is None else (w - 1 - p[0], p[1])
    return NormalizedExample(ex.image[:, ::-1].copy(), joints, ex.scale, ex.offset, ex.source)


def with_mirrors(examples):
    """The examples followed by their mirror images (2n outputs)."""
    examples = list(examples)
    return examples + [mirror_example(e) for e in examples]


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchConfig:
    positive_radius: float = 3.0
    neg_per_pos: int = 2
    min_neg_distance: float = 20.0
    patch_size: int = 64
    seed: int = 0
    # extra negatives drawn from the ring [min_neg_distance, near_outer] around the joint
    near_per_pos: int = 0
    near_outer: float = 24.0

    def __post_init__(self):
        if self.positive_radius < 0 or self.min_neg_distance <= self.positive_radius:
            raise ConfigError("need 0 <= positive_radius < min_neg_distance")
        if self.neg_per_pos < 0 or self.near_per_pos < 0:
            raise ConfigError("negative counts must be >= 0")
        if self.near_per_pos and self.near_outer <= self.min_neg_distance:
            raise ConfigError("near_outer must exceed min_neg_distance")


def patch_center(top, left, patch_size):
    c = (patch_size - 1) / 2.0
    return top + c, left + c


def _ring_candidates(jx, jy, c, ps, h, w, inner, outer):
    """Integer top-left corners whose window centre lies in the ring [inner, outer]."""
    tops = np.arange(math.floor(jy - c - outer), math.ceil(jy - c + outer) + 1)
    lefts = np.arange(math.floor(jx - c - outer), math.ceil(jx - c + outer) + 1)
    tt, ll = np.meshgrid(tops, lefts, indexing="ij")
    d2 = (tt + c - jy) ** 2 + (ll + c - jx) ** 2
    ok = (d2 >= inner * inner) & (d2 <= outer * outer)
    ok &= (tt >= 0) & (ll >= 0) & (tt + ps <= h) & (ll + ps <= w)
    return np.stack([tt[ok], ll[ok]], axis=1)


def sample_patches(examples, joint, config=None):
    """One jittered positive and ``neg_per_pos`` far negatives per normalised example.

    ``near_per_pos`` further negatives come from the ring between
    ``min_neg_distance`` and ``near_outer``, which sharpens the response peak.
    Patches are cut from the LCN-processed frame.  ``examples`` may be any
    iterable, so frames can be produced lazily.  Examples whose joint is
    missing or too close to the border for a full positive window are skipped;
    the skip count is logged.
    """
    config = config or PatchConfig()
    rng = check_random_state(config.seed)
    ps = config.patch_size
    c = (ps - 1) / 2.0
    samples, skipped, seen = [], 0, 0
    for ex in examples:
        seen += 1
        p = ex.joints.get(joint)
        h, w = ex.image.shape[:2]
        if p is None:
            skipped += 1
            continue
        jx, jy = p
        r = config.positive_radius
        tops = np.arange(math.floor(jy - c - r), math.ceil(jy - c + r) + 1)
        lefts = np.arange(math.floor(jx - c - r), math.ceil(jx - c + r) + 1)
        tt, ll = np.meshgrid(tops, lefts, indexing="ij")
        ok = ((tt + c - jy) ** 2 + (ll + c - jx) ** 2 <= r * r)
        ok &= (tt >= 0) & (ll >= 0) & (tt + ps <= h) & (ll + ps <= w)
        cand = np.stack([tt[ok], ll[ok]], axis=1)
        if len(cand) == 0:
            skipped += 1
            continue
        normed = lcn(ex.image)
        t, l = cand[rng.integers(len(cand))]
        samples.append(PatchSample(normed[t:t + ps, l:l + ps].copy(), 1, joint, ex.source,
                                   patch_center(t, l, ps)))
        for _ in range(config.neg_per_pos):
            while True:
                t = int(rng.integers(0, h - ps + 1))
                l = int(rng.integers(0, w - ps + 1))
                if math.hypot(t + c - jy, l + c - jx) >= config.min_neg_distance:
                    break
            samples.append(PatchSample(normed[t:t + ps, l:l + ps].copy(), 0, joint, ex.source,
                                       patch_center(t, l, ps)))
        near = _ring_candidates(jx, jy, c, ps, h, w, config.min_neg_distance, config.near_outer)
        for _ in range(config.near_per_pos if len(near) else 0):
            t, l = near[rng.integers(len(near))]
            samples.append(PatchSample(normed[t:t + ps, l:l + ps].copy(), 0, joint, ex.source,
                                       patch_center(t, l, ps)))
    if skipped:
        logger.warning("sample_patches(%s): skipped %d of %d examples (joint missing or too close to the border)",
                       joint, skipped, seen)
    return samples


def stack_patches(samples):
    """(X, y) arrays from a list of :class:`PatchSample`."""
    if not samples:
        return np.zeros((0, 0, 0, 0)), np.zeros(0)
    return np.stack([s.patch for s in samples]), np.array([s.label for s in samples], dtype=np.float64)


# ---------------------------------------------------------------------------
# synthetic stick figures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Stick-figure generator settings; lengths are in units of the figure scale."""

    n: int = 100
    seed: int = 0
    noise: float = 0.05
    width: int = FRAME_WIDTH
    height: int = FRAME_HEIGHT
    figure_scale: tuple = (0.9, 1.1)
    shoulder_half_width: float = 28.0
    neck_length: float = 40.0
    upper_arm: tuple = (30.0, 38.0)
    forearm: tuple = (26.0, 34.0)
    # upper-arm direction for the image-right arm, degrees; 0 = outward, 90 = down
    upper_arm_angle: tuple = (-30.0, 100.0)
    # forearm direction relative to the upper arm, degrees
    elbow_bend: tuple = (-90.0, 60.0)
    margin: float = 36.0
    test_fraction: float = 1.0 / 6.0


PALETTE = {
    "face": (0.95, 0.78, 0.55),
    "shoulder": (0.15, 0.35, 0.95),
    "elbow": (0.95, 0.20, 0.10),
    "wrist": (0.10, 0.85, 0.25),
    "limb": (0.92, 0.92, 0.92),
}


def _q(v):
    # snap to 1/256 px so mirrored coordinates stay exactly representable
    return round(v * 256.0) / 256.0


def sample_figure(rng, cfg):
    """Joint positions (x, y) relative to the shoulder midpoint, plus the figure scale."""
    f = rng.uniform(*cfg.figure_scale)
    l1 = rng.uniform(*cfg.upper_arm) * f
    l2 = rng.uniform(*cfg.forearm) * f
    a1 = math.radians(rng.uniform(*cfg.upper_arm_angle))
    a2 = a1 + math.radians(rng.uniform(*cfg.elbow_bend))
    r1 = rng.uniform(*cfg.upper_arm) * f
    r2 = rng.uniform(*cfg.forearm) * f
    b1 = math.radians(rng.uniform(*cfg.upper_arm_angle))
    b2 = b1 + math.radians(rng.uniform(*cfg.elbow_bend))
    sw = cfg.shoulder_half_width * f
    rel = {"face": (0.0, -cfg.neck_length * f), "lsho": (sw, 0.0), "rsho": (-sw, 0.0)}
    # the person's left arm appears on the image right
    rel["lelb"] = (sw + l1 * math.cos(a1), l1 * math.sin(a1))
    rel["lwri"] = (rel["lelb"][0] + l2 * math.cos(a2), rel["lelb"][1] + l2 * math.sin(a2))
    rel["relb"] = (-sw - r1 * math.cos(b1), r1 * math.sin(b1))
    rel["rwri"] = (rel["relb"][0] - r2 * math.cos(b2), rel["relb"][1] + r2 * math.sin(b2))
    return rel, f


def _segment_mask(yy, xx, p, q, half_width):
    px, py = p
    qx, qy = q
    dx, dy = qx - px, qy - py
    L2 = dx * dx + dy * dy
    t = np.clip(((xx - px) * dx + (yy - py) * dy) / L2, 0, 1) if L2 > 0 else 0.0
    ex = xx - (px + t * dx)
    ey = yy - (py + t * dy)
    return ex * ex + ey * ey <= half_width * half_width


def _marker_mask(yy, xx, kind, center, f):
    cx, cy = center
    dx, dy = xx - cx, yy - cy
    if kind == "face":
        return dx * dx + dy * dy <= (16.0 * f) ** 2
    if kind == "shoulder":
        a = 7.0 * f
        return (np.abs(dx) <= a) & (np.abs(dy) <= a)
    if kind == "elbow":
        r = 10.0 * f
        # upward-pointing equilateral triangle with circumradius r
        return (dy >= -r) & (dy <= r / 2) & (np.abs(dx) * math.sqrt(3) <= (dy + r))
    if kind == "wrist":
        a, t = 8.0 * f, 2.5 * f
        return ((np.abs(dx) <= t) & (np.abs(dy) <= a)) | ((np.abs(dy) <= t) & (np.abs(dx) <= a))
    raise ValueError(kind)


def render_figure(joints, f, cfg, rng):
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = rng.uniform(0.25, 0.55, size=3)
    img = np.broadcast_to(base, (h, w, 3)).copy()
    img += rng.normal(0.0, cfg.noise, size=(h, w, 3))
    mid = ((joints["lsho"][0] + joints["rsho"][0]) / 2, (joints["lsho"][1] + joints["rsho"][1]) / 2)
    hip = (mid[0], mid[1] + 110.0 * f)
    limb = np.array(PALETTE["limb"])
    segments = [(mid, joints["face"]), (joints["lsho"], joints["rsho"]), (mid, hip),
                (joints["lsho"], joints["lelb"]), (joints["lelb"], joints["lwri"]),
                (joints["rsho"], joints["relb"]), (joints["relb"], joints["rwri"])]
    for p, q in segments:
        img[_segment_mask(yy, xx, p, q, 2.0 * f)] = limb
    kinds = {"face": "face", "lsho": "shoulder", "rsho": "shoulder", "lelb": "elbow",
             "relb": "elbow", "lwri": "wrist", "rwri": "wrist"}
    for j in ("lsho", "rsho", "lelb", "relb", "lwri", "rwri", "face"):
        img[_marker_mask(yy, xx, kinds[j], joints[j], f)] = PALETTE[kinds[j]]
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(config=None, **overrides):
    """Render ``n`` single-person stick figures on noisy backgrounds.

    Returns ``(images, examples)``; image paths are ``img_00000.png`` style
    names, and the last ``round(n * test_fraction)`` examples are the test split.
    """
    cfg = replace(config or SyntheticConfig(), **overrides)
    rng = check_random_state(cfg.seed)
    n_test = int(round(cfg.n * cfg.test_fraction))
    images, examples = [], []
    for i in range(cfg.n):
        rel, f = sample_figure(rng, cfg)
        xs = [p[0] for p in rel.values()]
        ys = [p[1] for p in rel.values()]
        lo_x, hi_x = cfg.margin - min(xs), cfg.width - 1 - cfg.margin - max(xs)
        lo_y, hi_y = cfg.margin - min(ys), cfg.height - 1 - cfg.margin - max(ys)
        if lo_x > hi_x or lo_y > hi_y:
            raise ContractViolation("synthetic figure ranges do not fit inside the frame margins")
        mx = rng.uniform(lo_x, hi_x)
        my = rng.uniform(lo_y, hi_y)
        joints = {j: (_q(mx + p[0]), _q(my + p[1])) for j, p in rel.items()}
        joints = {j: joints[j] for j in JOINTS}
        fx, fy = joints["face"]
        side = CANONICAL_HEAD_HEIGHT * f
        box = (_q(fx - side / 2), _q(fy - side / 2), _q(side), _q(side))
        split = "test" if i >= cfg.n - n_test else "train"
        images.append(render_figure(joints, f, cfg, rng))
        examples.append(PoseExample(f"img_{i:05d}.png", joints, box, split))
    return images, examples
