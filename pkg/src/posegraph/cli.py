"""Command-line entry point: synth, train, learn-priors, detect, eval.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 internal contract violation.
"""
import argparse
import json
import logging
import multiprocessing
import os
import sys

import numpy as np

from . import __version__
from .convnet import Architecture, init_params, load_checkpoint, save_checkpoint
from .dataset import (
    FRAME_WIDTH,
    MIRROR_PAIRS,
    PART_JOINTS,
    PARTS,
    PatchConfig,
    generate_synthetic,
    load_annotations,
    mirror_example,
    normalization_transform,
    normalize_example,
    read_image,
    resolve_path,
    sample_patches,
    save_annotations,
    stack_patches,
    write_image,
)
from .evaluation import DEFAULT_RADII, accuracy_within_radius, emit_curves
from .exceptions import CheckpointError, ConfigError, ContractViolation, DataError
from .inference import (
    DEFAULT_SCALES,
    DEFAULT_SELECTION,
    SELECTION_RULES,
    ScaleConfig,
    format_detections,
    parse_detections,
    scale_responses,
    select_across_scales,
)
from .spatial import SpatialConfig, learn_priors, load_bundle, save_bundle
from .trainer import TrainConfig, format_log, train

logger = logging.getLogger("posegraph")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONTRACT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv(kind):
    def parse(text):
        try:
            return tuple(kind(t) for t in text.split(",") if t.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated values, got {text!r}") from None
    return parse


def _parts(text):
    parts = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [p for p in parts if p not in PARTS]
    if bad or not parts:
        raise argparse.ArgumentTypeError(f"parts must be drawn from {','.join(PARTS)}, got {text!r}")
    return parts


def _part_seed(seed, k):
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _ordered_map(fn, items, workers):
    """``map`` that fans out over processes when ``workers > 1``; order is preserved."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(min(workers, len(items))) as pool:
        return pool.map(fn, items, chunksize=1)


def _write_bytes(path, data):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)


def _require_file(path, what):
    if not os.path.isfile(path):
        raise DataError(f"{what} not found: {path}")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args):
    images, examples = generate_synthetic(n=args.n, seed=args.seed, noise=args.noise)
    img_dir = os.path.join(args.out, "images")
    try:
        os.makedirs(img_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {args.out}: {exc}") from exc
    stored = []
    for img, ex in zip(images, examples):
        rel = os.path.join("images", ex.image_path)
        write_image(os.path.join(args.out, rel), img)
        stored.append(type(ex)(rel, ex.joints, ex.head_box, ex.split))
    path = os.path.join(args.out, "annotations.txt")
    save_annotations(stored, path)
    n_test = sum(ex.split == "test" for ex in stored)
    print(f"wrote {len(stored)} examples ({len(stored) - n_test} train, {n_test} test) to {path}")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _select(examples, split):
    return [ex for ex in examples if split == "all" or ex.split == split]


def _normalized_stream(examples, root, mirror):
    for ex in examples:
        nex = normalize_example(ex, image_root=root)
        yield nex
        if mirror:
            yield mirror_example(nex)


def _train_part(job):
    k, part, args, examples, root = job
    seed = _part_seed(args.seed, k)
    arch = Architecture(patch_size=args.patch_size, conv_maps=args.conv_maps,
                        conv_sizes=args.conv_sizes, fc_sizes=args.fc_sizes + (1,))
    config = TrainConfig(learning_rate=args.learning_rate, momentum=args.momentum,
                         rms_decay=args.rms_decay, rms_epsilon=args.rms_epsilon, l2=args.l2,
                         dropout=args.dropout, batch_size=args.batch_size, epochs=args.epochs,
                         seed=seed, validation_fraction=args.validation_fraction)
    if args.epochs == 0:
        return part, save_checkpoint(init_params(seed, arch)), ""
    pcfg = PatchConfig(positive_radius=args.positive_radius, neg_per_pos=args.neg_per_pos,
                       min_neg_distance=args.min_neg_distance, patch_size=args.patch_size,
                       seed=seed, near_per_pos=args.near_per_pos, near_outer=args.near_outer)
    samples = sample_patches(_normalized_stream(examples, root, args.mirror), PART_JOINTS[part], pcfg)
    x, y = stack_patches(samples)
    del samples
    if len(y) == 0:
        raise DataError(f"no usable training examples for {part}")
    params, log = train(x, y, config, arch)
    if log:
        last = log[-1]
        logger.info("%s: %d patches, final val_loss %.4f val_acc %.4f", part, len(y), last.val_loss, last.val_acc)
    return part, save_checkpoint(params), format_log(log)


def cmd_train(args):
    _require_file(args.annotations, "annotation file")
    root = args.image_root or os.path.dirname(os.path.abspath(args.annotations))
    examples = _select(load_annotations(args.annotations, root), args.split)
    if not examples and args.epochs > 0:
        raise DataError(f"no {args.split} examples in {args.annotations}")
    # validate the configuration before any work starts
    TrainConfig(learning_rate=args.learning_rate, momentum=args.momentum, rms_decay=args.rms_decay,
                rms_epsilon=args.rms_epsilon, l2=args.l2, dropout=args.dropout,
                batch_size=args.batch_size, epochs=args.epochs,
                validation_fraction=args.validation_fraction)
    PatchConfig(positive_radius=args.positive_radius, neg_per_pos=args.neg_per_pos,
                min_neg_distance=args.min_neg_distance, near_per_pos=args.near_per_pos,
                near_outer=args.near_outer)
    os.makedirs(args.out, exist_ok=True)
    jobs = [(PARTS.index(p), p, args, examples, root) for p in args.parts]
    for part, blob, log in _ordered_map(_train_part, jobs, args.workers):
        _write_bytes(os.path.join(args.out, f"{part}.ckpt"), blob)
        with open(os.path.join(args.out, f"{part}.log"), "w", encoding="utf-8", newline="\n") as f:
            f.write(log)
        print(f"wrote {os.path.join(args.out, part + '.ckpt')}")


# ---------------------------------------------------------------------------
# learn-priors
# ---------------------------------------------------------------------------

def cmd_learn_priors(args):
    _require_file(args.annotations, "annotation file")
    root = args.image_root or os.path.dirname(os.path.abspath(args.annotations))
    examples = _select(load_annotations(args.annotations, root), args.split)
    if len(examples) < args.min_examples:
        raise DataError(f"need at least {args.min_examples} examples to learn priors, got {len(examples)}")
    # priors only need joint geometry, so frames are not resampled here
    normed = [_geometry_only(ex) for ex in examples]
    if args.mirror:
        normed = normed + [_mirror_geometry(n) for n in normed]
    bundle = learn_priors(normed, args.grid_radius, args.sigma, args.face_sigma)
    _write_bytes(args.out, save_bundle(bundle))
    print(f"wrote {args.out} from {len(normed)} examples")


class _JointsOnly:
    __slots__ = ("joints",)

    def __init__(self, joints):
        self.joints = joints


def _geometry_only(ex):
    s, (tx, ty) = normalization_transform(ex)
    return _JointsOnly({j: None if p is None else (s * p[0] + tx, s * p[1] + ty)
                        for j, p in ex.joints.items()})


def _mirror_geometry(nex):
    return _JointsOnly({MIRROR_PAIRS[j]: None if p is None else (FRAME_WIDTH - 1 - p[0], p[1])
                        for j, p in nex.joints.items()})


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------

_DETECT_STATE = {}


def _detect_one(job):
    path, ex_id = job
    st = _DETECT_STATE
    image = read_image(path)
    per_scale = scale_responses(image, st["params"], st["bundle"], st["scales"], st["spatial"])
    best = select_across_scales(per_scale, use_filtered=st["bundle"] is not None, rule=st["rule"])
    return [(ex_id, best[p]) for p in PARTS]


def _load_models(model_dir):
    params = {}
    for part in PARTS:
        path = os.path.join(model_dir, f"{part}.ckpt")
        _require_file(path, f"checkpoint for {part}")
        with open(path, "rb") as f:
            params[part] = load_checkpoint(f.read())
    return params


def cmd_detect(args):
    _require_file(args.annotations, "annotation file")
    params = _load_models(args.models)
    bundle = None
    if not args.no_spatial:
        if args.priors is None:
            raise DataError("--priors is required unless --no-spatial is given")
        _require_file(args.priors, "prior bundle")
        with open(args.priors, "rb") as f:
            bundle = load_bundle(f.read())
    root = args.image_root or os.path.dirname(os.path.abspath(args.annotations))
    examples = _select(load_annotations(args.annotations, root), args.split)
    _DETECT_STATE.update(params=params, bundle=bundle, scales=ScaleConfig(args.scales),
                         spatial=SpatialConfig(args.lam, args.log_floor), rule=args.selection)
    jobs = [(resolve_path(ex.image_path, root), ex.image_path) for ex in examples]
    results = _ordered_map(_detect_one, jobs, args.workers)
    text = format_detections(r for rows in results for r in rows)
    _write_bytes(args.out, text.encode("utf-8"))
    print(f"wrote {len(examples)} x {len(PARTS)} detections to {args.out}")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args):
    _require_file(args.annotations, "annotation file")
    examples = _select(load_annotations(args.annotations, check_images=False), args.split)
    ground_truth = {ex.image_path: {p: ex.joints.get(j) for p, j in PART_JOINTS.items()} for ex in examples}
    curves = {}
    for spec in args.detections:
        label, _, path = spec.rpartition("=")
        _require_file(path, "detection file")
        with open(path, encoding="utf-8") as f:
            rows = parse_detections(f.read())
        dets = {}
        for ex_id, d in rows:
            dets.setdefault(ex_id, {})[d.joint] = d
        curves[label or os.path.splitext(os.path.basename(path))[0]] = accuracy_within_radius(
            dets, ground_truth, args.radii)
    text = emit_curves(curves if len(curves) > 1 else next(iter(curves.values())), None)
    _write_bytes(args.out, text.encode("utf-8"))
    for label, cs in curves.items():
        summary = "  ".join(f"{c.joint} {c.at(args.report_radius):.3f}" for c in cs)
        print(f"{label}: accuracy within {args.report_radius} px: {summary}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="posegraph", formatter_class=fmt,
                     description="Convnet part detectors with a learned spatial model for 2D pose.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON file of flag defaults (flags on the command line win)")
    parser.add_argument("--seed", type=int, default=0, help="base random seed")
    parser.add_argument("--workers", type=int, default=1, help="worker processes (1 = in-process)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    # the shared flags may also follow the subcommand
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="base random seed (default: 0)")
    common.add_argument("--workers", type=int, default=argparse.SUPPRESS,
                        help="worker processes (default: 1)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress (default: off)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], formatter_class=fmt, help="render a synthetic stick-figure dataset")
    p.add_argument("--out", required=True, help="output directory (images/ and annotations.txt)")
    p.add_argument("--n", type=int, default=600, help="number of images; the last sixth is the test split")
    p.add_argument("--noise", type=float, default=0.05, help="background noise standard deviation")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train one detector per part")
    p.add_argument("--annotations", required=True, help="annotation file")
    p.add_argument("--image-root", help="directory image paths are relative to (default: annotation dir)")
    p.add_argument("--split", default="train", choices=("train", "test", "all"), help="records to use")
    p.add_argument("--out", required=True, help="directory for <part>.ckpt and <part>.log")
    p.add_argument("--parts", type=_parts, default=PARTS, help="comma-separated parts to train")
    p.add_argument("--mirror", action="store_true", help="add horizontally mirrored copies (2x examples)")
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--batch-size", type=int, default=64, help="mini-batch size")
    p.add_argument("--learning-rate", type=float, default=1e-3, help="step size")
    p.add_argument("--momentum", type=float, default=0.9, help="Nesterov momentum")
    p.add_argument("--rms-decay", type=float, default=0.99, help="RMSPROP decay of the squared-gradient average")
    p.add_argument("--rms-epsilon", type=float, default=1e-8, help="RMSPROP denominator offset")
    p.add_argument("--l2", type=float, default=1e-4, help="weight decay")
    p.add_argument("--dropout", type=float, default=0.5, help="dropout rate on fully-connected inputs")
    p.add_argument("--validation-fraction", type=float, default=0.1, help="held-out fraction of patches")
    p.add_argument("--patch-size", type=int, default=64, help="detector input window, pixels")
    p.add_argument("--conv-maps", type=_csv(int), default=(16, 32, 64), help="feature maps per conv stage")
    p.add_argument("--conv-sizes", type=_csv(int), default=(5, 5, 5), help="filter size per conv stage")
    p.add_argument("--fc-sizes", type=_csv(int), default=(512, 256), help="hidden fully-connected widths")
    p.add_argument("--positive-radius", type=float, default=3.0, help="positive window jitter, pixels")
    p.add_argument("--neg-per-pos", type=int, default=2, help="negatives drawn anywhere in the frame")
    p.add_argument("--min-neg-distance", type=float, default=20.0, help="minimum negative distance, pixels")
    p.add_argument("--near-per-pos", type=int, default=0, help="extra negatives from the ring up to --near-outer")
    p.add_argument("--near-outer", type=float, default=24.0, help="outer radius of the near-negative ring")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("learn-priors", parents=[common], formatter_class=fmt, help="learn the pairwise and face priors")
    p.add_argument("--annotations", required=True, help="annotation file")
    p.add_argument("--image-root", help="directory image paths are relative to (default: annotation dir)")
    p.add_argument("--split", default="train", choices=("train", "test", "all"), help="records to use")
    p.add_argument("--out", required=True, help="prior bundle file")
    p.add_argument("--mirror", action="store_true", help="add mirrored copies of every example")
    p.add_argument("--grid-radius", type=int, default=60, help="pairwise histogram half-size, pixels")
    p.add_argument("--sigma", type=float, default=3.0, help="pairwise histogram smoothing, pixels")
    p.add_argument("--face-sigma", type=float, default=10.0, help="face position prior smoothing, pixels")
    p.add_argument("--min-examples", type=int, default=1, help="refuse to learn from fewer examples")
    p.set_defaults(func=cmd_learn_priors)

    p = sub.add_parser("detect", parents=[common], formatter_class=fmt, help="run detection over annotated images")
    p.add_argument("--annotations", required=True, help="annotation file listing the images")
    p.add_argument("--image-root", help="directory image paths are relative to (default: annotation dir)")
    p.add_argument("--split", default="test", choices=("train", "test", "all"), help="records to use")
    p.add_argument("--models", required=True, help="directory holding <part>.ckpt")
    p.add_argument("--priors", help="prior bundle from learn-priors")
    p.add_argument("--out", required=True, help="detection file")
    p.add_argument("--no-spatial", action="store_true", help="unary-only detections (no spatial model)")
    p.add_argument("--scales", type=_csv(float), default=DEFAULT_SCALES, help="pyramid scales, decreasing")
    p.add_argument("--selection", choices=SELECTION_RULES, default=DEFAULT_SELECTION,
                   help="how detections are compared across scales")
    p.add_argument("--lam", type=float, default=1.0, help="exponent on each part's own response")
    p.add_argument("--log-floor", type=float, default=1e-6, help="probability floor before logs")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="accuracy-within-radius curves")
    p.add_argument("--annotations", required=True, help="ground-truth annotation file")
    p.add_argument("--split", default="test", choices=("train", "test", "all"), help="records to use")
    p.add_argument("--detections", required=True, nargs="+",
                   help="detection files, optionally LABEL=PATH for side-by-side columns")
    p.add_argument("--out", required=True, help="curve file (CSV)")
    p.add_argument("--radii", type=_csv(float), default=DEFAULT_RADII, help="pixel thresholds")
    p.add_argument("--report-radius", type=float, default=5.0, help="radius printed in the summary")
    p.set_defaults(func=cmd_eval)
    return parser


def _apply_config_file(parser, argv):
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        with open(known.config, encoding="utf-8") as f:
            values = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config file {known.config}: {exc}") from exc
    if not isinstance(values, dict):
        raise DataError(f"config file {known.config} must hold a JSON object")
    values = {k.replace("-", "_"): tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    parser.set_defaults(**values)
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            sp.set_defaults(**values)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
