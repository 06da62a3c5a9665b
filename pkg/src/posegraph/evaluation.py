"""Fraction of test joints detected within a pixel radius of the ground truth."""
from dataclasses import dataclass, field

import numpy as np

from .dataset import PART_JOINTS, PARTS
from .exceptions import DataError

DEFAULT_RADII = tuple(range(0, 31))


@dataclass
class AccuracyCurve:
    joint: str
    radii: list
    accuracy: list
    n: int = 0
    missing: list = field(default_factory=list)

    def at(self, radius):
        return self.accuracy[self.radii.index(radius)]


def _xy(v):
    if v is None:
        return None
    if hasattr(v, "x"):
        return float(v.x), float(v.y)
    return float(v[0]), float(v[1])


def accuracy_within_radius(detections, ground_truth, radii=DEFAULT_RADII, parts=PARTS):
    """Per-part accuracy curves.

    ``detections`` maps example id -> {part: Detection or (x, y)}; ``ground_truth``
    maps example id -> {joint or part: (x, y)} (joint names such as ``lwri`` are
    accepted).  A ground-truth example without a detection counts as wrong at
    every radius and is listed in ``curve.missing``.  Detections for unknown
    ids raise :class:`DataError`.
    """
    orphans = sorted(set(detections) - set(ground_truth))
    if orphans:
        raise DataError(f"detections for ids absent from the ground truth: {orphans}")
    radii = [float(r) if not float(r).is_integer() else int(r) for r in radii]
    r_arr = np.asarray(radii, dtype=np.float64)
    curves = []
    for part in parts:
        dists, missing = [], []
        for ex_id in sorted(ground_truth):
            gt = ground_truth[ex_id]
            g = _xy(gt.get(part, gt.get(PART_JOINTS.get(part, part))))
            if g is None:
                continue
            d = _xy(detections.get(ex_id, {}).get(part))
            if d is None:
                missing.append(ex_id)
                dists.append(np.inf)
            else:
                dists.append(float(np.hypot(d[0] - g[0], d[1] - g[1])))
        dists = np.asarray(dists)
        n = len(dists)
        if n:
            acc = [float(np.count_nonzero(dists <= r)) / n for r in r_arr]
        else:
            acc = [0.0] * len(radii)
        curves.append(AccuracyCurve(part, list(radii), acc, n, missing))
    return curves


def emit_curves(curves, path=None):
    """Write curves as comma-separated columns: radius, then one column per curve.

    ``curves`` is a list of :class:`AccuracyCurve` or a mapping label -> list,
    in which case columns are named ``label:part`` for side-by-side comparison.
    Returns the text; writes it to ``path`` when given.
    """
    if isinstance(curves, dict):
        columns = [(f"{label}:{c.joint}", c) for label, cs in curves.items() for c in cs]
    else:
        columns = [(c.joint, c) for c in curves]
    lines = [",".join(["radius"] + [name for name, _ in columns])]
    if columns:
        radii = columns[0][1].radii
        for name, c in columns:
            if c.radii != radii:
                raise DataError(f"curve {name} uses different radii")
            if any(a > b for a, b in zip(c.accuracy, c.accuracy[1:])):
                raise DataError(f"curve {name} is not monotone in radius")
        for i, r in enumerate(radii):
            lines.append(",".join([repr(r)] + [repr(c.accuracy[i]) for _, c in columns]))
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    return text


def read_curves(path):
    """Inverse of :func:`emit_curves`: column name -> list of floats."""
    with open(path, encoding="utf-8") as f:
        rows = [line.rstrip("\n").split(",") for line in f if line.strip()]
    header = rows[0]
    cols = {name: [] for name in header}
    for row in rows[1:]:
        for name, v in zip(header, row):
            cols[name].append(float(v))
    return cols
