import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posegraph.convnet import Architecture, NetworkParams, ResponseMap, forward_full, init_params
from posegraph.dataset import PARTS, generate_synthetic, normalize_example
from posegraph.detector import PartDetector
from posegraph.exceptions import ConfigError, ContractViolation, DataError
from posegraph.inference import (
    DEFAULT_SCALES,
    Detection,
    NmsConfig,
    PoseDetector,
    ScaleConfig,
    argmax_cell,
    build_pyramid,
    detect,
    detect_multi,
    format_detections,
    nms_peaks,
    parse_detections,
    scale_responses,
    select_across_scales,
)
from posegraph.preprocessing import lcn
from posegraph.spatial import SpatialModel, learn_priors
from posegraph.tensor import rescale

ARCH = Architecture(conv_maps=(2, 2, 2), fc_sizes=(4, 4, 1))


def random_params(seed):
    rng = np.random.default_rng(seed)
    base = init_params(rng, ARCH)
    return NetworkParams.from_arrays(ARCH, [a + rng.normal(0, 0.05, a.shape) for a in base.arrays()])


def all_params(seed=0):
    return {p: random_params(seed + k) for k, p in enumerate(PARTS)}


# --- configuration and pyramid ------------------------------------------------

def test_default_scales_geometric():
    s = np.array(DEFAULT_SCALES)
    assert len(s) == 6
    np.testing.assert_allclose(s[:-1] / s[1:], 1.15, atol=0.002)


def test_scale_config_validation():
    with pytest.raises(ConfigError):
        ScaleConfig((1.0, 1.0))
    with pytest.raises(ConfigError):
        ScaleConfig((1.0, -0.5))
    with pytest.raises(ConfigError):
        NmsConfig(window_radius=0.5)
    with pytest.raises(ConfigError):
        NmsConfig(top_n=0)


def test_pyramid_levels():
    img = np.random.default_rng(0).random((200, 200, 3))
    levels = build_pyramid(img, ScaleConfig((1.0, 0.5)))
    assert [s for _, s in levels] == [1.0, 0.5]
    np.testing.assert_array_equal(levels[0][0], lcn(img))
    assert levels[1][0].shape == (100, 100, 3)


def test_pyramid_drops_small_levels(caplog):
    img = np.random.default_rng(1).random((100, 100, 3))
    levels = build_pyramid(img, ScaleConfig((1.0, 0.5)))
    assert [s for _, s in levels] == [1.0]
    assert "dropping scale 0.500" in caplog.text
    with pytest.raises(ContractViolation):
        build_pyramid(np.zeros((40, 40, 3)))


# --- peaks and NMS --------------------------------------------------------------

def nms_oracle(rmap, radius, top_n):
    rows, cols = rmap.pixel_grid()
    cells = [(rmap.probs[r, c], r * rmap.shape[1] + c, rows[r, c], cols[r, c])
             for r in range(rmap.shape[0]) for c in range(rmap.shape[1])]
    out = []
    while len(out) < top_n:
        alive = [t for t in cells if all(math.hypot(t[2] - o[2], t[3] - o[3]) > radius for o in out)]
        if not alive:
            break
        best = max(alive, key=lambda t: (t[0], -t[1]))
        if best[0] <= 0:
            break
        out.append(best)
    return [(o[3], o[2], o[0]) for o in out]


def test_single_delta_peak():
    p = np.zeros((10, 10))
    p[3, 4] = 0.7
    dets = nms_peaks(ResponseMap(p, 1.0, (0.0, 0.0), 4), NmsConfig(20, 3))
    assert len(dets) == 1 and (dets[0].x, dets[0].y) == (16.0, 12.0)


def test_two_equal_peaks():
    p = np.zeros((5, 20))
    p[2, 2] = p[2, 15] = 1.0
    dets = nms_peaks(ResponseMap(p, 1.0, (0.0, 0.0), 4), NmsConfig(20, 2))
    assert [(d.x, d.y) for d in dets] == [(8.0, 8.0), (60.0, 8.0)]


@pytest.mark.parametrize("seed", range(10))
def test_nms_matches_greedy_oracle(seed):
    rng = np.random.default_rng(seed)
    rmap = ResponseMap(rng.random((12, 15)), 0.8, (31.5, 31.5), 4)
    got = nms_peaks(rmap, NmsConfig(25, 6), "wrist")
    want = nms_oracle(rmap, 25, 6)
    assert [(d.x, d.y, d.confidence) for d in got] == want


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1, 60), st.integers(1, 8))
def test_nms_separation(seed, radius, top_n):
    rmap = ResponseMap(np.random.default_rng(seed).random((9, 11)), 1.0, (31.5, 31.5), 4)
    dets = nms_peaks(rmap, NmsConfig(radius, top_n))
    for i, a in enumerate(dets):
        for b in dets[i + 1:]:
            assert math.hypot(a.x - b.x, a.y - b.y) > radius


def test_argmax_tie_break():
    p = np.zeros((4, 4))
    p[2, 1] = p[1, 3] = 1.0
    assert argmax_cell(p) == (1, 3)


# --- cross-scale selection -----------------------------------------------------------

def fake_scales(peaks, shape=(6, 6)):
    """per-scale tuples with one peak (value, cell) per scale for every part."""
    out = []
    for s, (val, cell) in peaks.items():
        maps = {}
        for p in PARTS:
            m = np.full(shape, 0.01)
            m[cell] = val
            maps[p] = ResponseMap(m, s, (31.5, 31.5), 4, np.log(m / (1 - m)))
        out.append((s, maps, maps))
    return out


def test_pattern_at_one_scale_wins_under_every_rule():
    per = fake_scales({1.25: (0.02, (1, 1)), 0.945: (0.9, (3, 2)), 0.621: (0.02, (0, 0))})
    for rule in ("filtered", "evidence", "person"):
        best = select_across_scales(per, rule=rule)
        assert all(best[p].scale == 0.945 for p in PARTS)
        assert best["face"].x == (31.5 + 8) / 0.945


def test_filtered_rule_reports_max_filtered_probability():
    rng = np.random.default_rng(3)
    per = []
    for s in (1.0, 0.8, 0.6):
        maps = {p: ResponseMap(rng.random((5, 7)), s, (31.5, 31.5), 4) for p in PARTS}
        per.append((s, maps, {p: m.with_probs(m.probs / m.probs.sum()) for p, m in maps.items()}))
    best = select_across_scales(per, rule="filtered")
    for p in PARTS:
        peaks = [f[p].probs.max() for _, _, f in per]
        assert best[p].confidence == max(peaks)
        s_idx = int(np.argmax(peaks))
        r, c = argmax_cell(per[s_idx][2][p].probs)
        assert (best[p].y, best[p].x) == per[s_idx][2][p].cell_to_pixel(r, c)


def test_equal_scales_first_wins():
    per = fake_scales({1.0: (0.5, (2, 2)), 0.5: (0.5, (2, 2))})
    for rule in ("filtered", "evidence", "person"):
        assert select_across_scales(per, rule=rule)["wrist"].scale == 1.0


def test_unknown_rule():
    with pytest.raises(ConfigError):
        select_across_scales(fake_scales({1.0: (0.5, (0, 0))}), rule="vote")


# --- dense detection ------------------------------------------------------------------

def test_scale_responses_structure():
    img = np.random.default_rng(4).random((100, 120, 3))
    per = scale_responses(img, all_params(), None, ScaleConfig((1.0, 0.7)))
    assert [s for s, _, f in per] == [1.0, 0.7] and all(f is None for _, _, f in per)
    assert per[0][1]["face"].shape == ((100 - 64) // 4 + 1, (120 - 64) // 4 + 1)
    with pytest.raises(ContractViolation):
        scale_responses(img, {"face": random_params(0)})


def test_detect_scale_consistency():
    rng = np.random.default_rng(5)
    img = rescale(rng.random((30, 35, 3)), 4.0)  # smooth content
    params = all_params(7)
    small = detect(img, params, None, ScaleConfig((1.0, 0.8)))
    big = detect(rescale(img, 2.0), params, None, ScaleConfig((0.5, 0.4)))
    for p in PARTS:
        assert abs(big[p].x / 2 - small[p].x) <= 1 and abs(big[p].y / 2 - small[p].y) <= 1


def test_side_by_side_copies_are_symmetric():
    rng = np.random.default_rng(6)
    a = np.full((112, 128, 3), 0.5)
    a[32:80, 32:96] = rng.random((48, 64, 3))
    img = np.concatenate([a, a], axis=1)
    params = random_params(8)
    rmap = forward_full(params, lcn(img), 1.0)
    w_cells = 128 // 4
    inside = (128 - 64) // 4 + 1  # windows wholly inside one copy
    np.testing.assert_allclose(rmap.probs[:, :inside], rmap.probs[:, w_cells:w_cells + inside], rtol=1e-12)
    sub = np.concatenate([rmap.probs[:, :inside], rmap.probs[:, w_cells:w_cells + inside]], axis=1)
    r, c = argmax_cell(sub)
    assert c < inside


def test_detect_with_spatial_model_and_estimators():
    imgs, exs = generate_synthetic(n=6, seed=2)
    norm = [normalize_example(e, i) for i, e in zip(imgs, exs)]
    bundle = learn_priors(norm)
    params = all_params(11)
    dets = detect(imgs[0], params, bundle, ScaleConfig((1.0, 0.8)))
    assert set(dets) == set(PARTS)
    for d in dets.values():
        assert 0 <= d.x < 320 and 0 <= d.y < 240 and d.scale in (1.0, 0.8)
    dets_u = detect(imgs[0], params, None, ScaleConfig((1.0,)), selection="filtered")
    assert all(d.scale == 1.0 for d in dets_u.values())
    multi = detect_multi(imgs[0], params, bundle, ScaleConfig((1.0,)), nms_config=NmsConfig(20, 3))
    for p in PARTS:
        assert 1 <= len(multi[p]) <= 3
    detectors = {p: PartDetector.from_params(params[p]) for p in PARTS}
    est = PoseDetector(detectors, SpatialModel.from_bundle(bundle), scales=(1.0, 0.8)).fit()
    assert est.predict([imgs[0]])[0] == dets
    with pytest.raises(ContractViolation):
        PoseDetector({"face": detectors["face"]}).fit()


# --- detection files ------------------------------------------------------------------------

def test_detection_file_round_trip():
    recs = [("images/a.png", Detection("face", 1.5, 2.25, 0.875, 0.945)),
            ("images/a.png", Detection("wrist", 100.0, 7.0, 1e-12, 1.25))]
    text = format_detections(recs)
    assert parse_detections(text) == recs
    assert format_detections(parse_detections(text)) == text


def test_detection_file_errors():
    with pytest.raises(DataError, match="line 1"):
        parse_detections("nope\n")
    with pytest.raises(DataError, match="line 2"):
        parse_detections("posegraph-detections v1\na,face,1,2\n")
    with pytest.raises(DataError, match="line 2"):
        parse_detections("posegraph-detections v1\na,face,x,2,3,4\n")
