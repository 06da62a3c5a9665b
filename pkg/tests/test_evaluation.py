import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posegraph.dataset import PARTS
from posegraph.evaluation import AccuracyCurve, accuracy_within_radius, emit_curves, read_curves
from posegraph.exceptions import DataError
from posegraph.inference import Detection


def gt_set(n, seed=0):
    rng = np.random.default_rng(seed)
    return {f"im{i}": {p: tuple(rng.uniform(0, 300, 2)) for p in PARTS} for i in range(n)}


def test_perfect_detections():
    gt = gt_set(5)
    curves = accuracy_within_radius(gt, gt)
    for c in curves:
        assert all(a == 1.0 for a in c.accuracy) and c.at(0) == 1.0


def test_step_at_ten_pixels():
    gt = {k: {p: (float(round(x)), float(round(y))) for p, (x, y) in v.items()} for k, v in gt_set(6, 1).items()}
    dets = {k: {p: (x + 6.0, y + 8.0) for p, (x, y) in v.items()} for k, v in gt.items()}
    for c in accuracy_within_radius(dets, gt):
        assert all(a == (1.0 if r >= 10 else 0.0) for r, a in zip(c.radii, c.accuracy))


@pytest.mark.parametrize("seed", range(5))
def test_random_displacements_match_counting(seed):
    rng = np.random.default_rng(seed)
    gt = gt_set(40, seed)
    dets = {k: {p: (x + rng.normal(0, 8), y + rng.normal(0, 8)) for p, (x, y) in v.items()}
            for k, v in gt.items()}
    radii = [0, 2.5, 5, 10, 20]
    curves = accuracy_within_radius(dets, gt, radii)
    for c in curves:
        for r, a in zip(radii, c.accuracy):
            count = 0
            for k in gt:
                d = dets[k][c.joint]
                g = gt[k][c.joint]
                count += math.sqrt((d[0] - g[0]) ** 2 + (d[1] - g[1]) ** 2) <= r
            assert a == count / 40


def test_missing_detections_count_wrong_and_are_reported():
    gt = gt_set(4)
    dets = {k: v for k, v in gt.items() if k != "im2"}
    curves = accuracy_within_radius(dets, gt)
    assert curves[0].missing == ["im2"]
    assert curves[0].at(30) == 0.75


def test_orphan_ids_error():
    gt = gt_set(2)
    with pytest.raises(DataError, match="zzz"):
        accuracy_within_radius({**gt, "zzz": gt["im0"]}, gt)


def test_joint_names_accepted_and_detection_objects():
    gt = {"a": {"face": (10.0, 10.0), "lsho": (20.0, 20.0), "lelb": (0.0, 0.0), "lwri": (5.0, 5.0)}}
    dets = {"a": {p: Detection(p, 10.0, 10.0, 0.9, 1.0) for p in PARTS}}
    curves = {c.joint: c for c in accuracy_within_radius(dets, gt, [0, 15])}
    assert curves["face"].accuracy == [1.0, 1.0]
    assert curves["shoulder"].accuracy == [0.0, 1.0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.integers(0, 1000))
def test_curves_are_monotone(offsets, seed):
    gt = {f"i{k}": {p: (0.0, 0.0) for p in PARTS} for k in range(len(offsets))}
    dets = {f"i{k}": {p: (o, 0.0) for p in PARTS} for k, o in enumerate(offsets)}
    for c in accuracy_within_radius(dets, gt, sorted(set(np.random.default_rng(seed).uniform(0, 120, 8)))):
        assert all(a <= b for a, b in zip(c.accuracy, c.accuracy[1:]))


def test_radius_beyond_diagonal_is_one():
    gt = gt_set(10)
    dets = {k: {p: (0.0, 0.0) for p in PARTS} for k in gt}
    diag = math.hypot(300, 300)
    for c in accuracy_within_radius(dets, gt, [diag]):
        assert c.accuracy == [1.0]


def test_emit_and_read_round_trip(tmp_path):
    gt = gt_set(3)
    curves = accuracy_within_radius(gt, gt, [0, 5])
    path = tmp_path / "c.csv"
    text = emit_curves({"spatial": curves, "unary": curves}, path)
    assert text.splitlines()[0].startswith("radius,spatial:face")
    cols = read_curves(path)
    assert cols["radius"] == [0.0, 5.0] and cols["unary:wrist"] == [1.0, 1.0]
    assert emit_curves(curves) == emit_curves(curves)


def test_emit_rejects_non_monotone_or_mismatched():
    with pytest.raises(DataError):
        emit_curves([AccuracyCurve("face", [0, 1], [1.0, 0.5])])
    with pytest.raises(DataError):
        emit_curves([AccuracyCurve("face", [0, 1], [0.0, 1.0]), AccuracyCurve("wrist", [0, 2], [0.0, 1.0])])
