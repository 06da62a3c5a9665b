import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from posegraph.exceptions import ContractViolation
from posegraph.tensor import (
    KernelStack,
    conv2d_same_centered,
    conv2d_valid,
    gaussian_smooth,
    maxpool,
    maxpool_backward,
    maxpool_batch,
    rescale,
    upsample_nearest,
)

from oracles import conv_same_centered_loops, conv_valid_loops, maxpool_loops


def test_conv_valid_identity_scale():
    x = np.ones((3, 3, 1))
    k = KernelStack(np.full((1, 1, 1, 1), 2.0), [0.0])
    np.testing.assert_array_equal(conv2d_valid(x, k), np.full((3, 3, 1), 2.0))


def test_conv_valid_ramp_average():
    x = np.arange(25, dtype=float).reshape(5, 5, 1)
    k = KernelStack(np.full((1, 1, 3, 3), 1 / 9), [0.0])
    out = conv2d_valid(x, k)
    assert out.shape == (3, 3, 1)
    assert out[1, 1, 0] == pytest.approx(x[1:4, 1:4].mean(), rel=1e-12)
    np.testing.assert_allclose(out, conv_valid_loops(x, k.weights, k.bias), rtol=1e-12)


def test_conv_valid_zero_kernel_gives_bias():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 7, 2))
    k = KernelStack(np.zeros((3, 2, 3, 3)), [0.5, -1.0, 2.0])
    out = conv2d_valid(x, k)
    for m, b in enumerate([0.5, -1.0, 2.0]):
        assert np.all(out[:, :, m] == b)


def test_conv_valid_one_by_one_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 4, 3))
    k = KernelStack(np.eye(3).reshape(3, 3, 1, 1), np.zeros(3))
    np.testing.assert_array_equal(conv2d_valid(x, k), x)


def test_conv_valid_mismatch_names_shapes():
    with pytest.raises(ContractViolation, match=r"\(1, 5, 5, 2\).*\(1, 3, 3, 3\)"):
        conv2d_valid(np.zeros((5, 5, 2)), KernelStack(np.zeros((1, 3, 3, 3)), [0.0]))


@pytest.mark.parametrize("seed", range(100))
def test_conv_valid_matches_loops(seed):
    rng = np.random.default_rng(seed)
    h, w, c, m = rng.integers(3, 8), rng.integers(3, 8), rng.integers(1, 3), rng.integers(1, 3)
    kh, kw = rng.integers(1, 4), rng.integers(1, 4)
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=(h, w, c))
    k = KernelStack(rng.normal(size=(m, c, kh, kw)), rng.normal(size=m))
    got = conv2d_valid(x, k, stride)
    want = conv_valid_loops(x, k.weights, k.bias, stride)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_same_centered_delta_prior_is_identity():
    rng = np.random.default_rng(2)
    a = rng.random((7, 9))
    p = np.zeros((5, 3))
    p[2, 1] = 1.0
    np.testing.assert_array_equal(conv2d_same_centered(a, p), a)


def test_same_centered_translates_prior():
    rng = np.random.default_rng(3)
    p = rng.random((5, 5))
    a = np.zeros((9, 9))
    a[1, 6] = 1.0
    out = conv2d_same_centered(a, p)
    want = np.zeros((9, 9))
    for di in range(-2, 3):
        for dj in range(-2, 3):
            r, c = 1 + di, 6 + dj
            if 0 <= r < 9 and 0 <= c < 9:
                want[r, c] = p[di + 2, dj + 2]
    np.testing.assert_array_equal(out, want)


@pytest.mark.parametrize("seed", range(100))
def test_same_centered_matches_loops(seed):
    rng = np.random.default_rng(100 + seed)
    a = rng.random((rng.integers(2, 10), rng.integers(2, 10)))
    p = rng.random((2 * rng.integers(0, 3) + 1, 2 * rng.integers(0, 3) + 1))
    np.testing.assert_allclose(conv2d_same_centered(a, p), conv_same_centered_loops(a, p), rtol=1e-10)


def test_same_centered_random_9x9_5x5():
    rng = np.random.default_rng(4)
    a, p = rng.random((9, 9)), rng.random((5, 5))
    np.testing.assert_allclose(conv2d_same_centered(a, p), conv_same_centered_loops(a, p), rtol=1e-10)


def test_same_centered_rejects_even_prior():
    with pytest.raises(ContractViolation):
        conv2d_same_centered(np.ones((4, 4)), np.ones((2, 3)))


def test_same_centered_linear():
    rng = np.random.default_rng(5)
    a, b, p = rng.random((8, 6)), rng.random((8, 6)), rng.random((5, 3))
    lhs = conv2d_same_centered(2.5 * a - 0.75 * b, p)
    rhs = 2.5 * conv2d_same_centered(a, p) - 0.75 * conv2d_same_centered(b, p)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)
    q = rng.random((5, 3))
    np.testing.assert_allclose(conv2d_same_centered(a, 3 * p + q),
                               3 * conv2d_same_centered(a, p) + conv2d_same_centered(a, q), rtol=1e-10)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 7), elements=st.floats(0, 10)),
       arrays(np.float64, (3, 5), elements=st.floats(0, 10)))
def test_same_centered_mass_bound(a, p):
    out = conv2d_same_centered(a, p)
    assert out.sum() <= a.sum() * p.sum() * (1 + 1e-12) + 1e-12


def test_same_centered_mass_equality_when_inside():
    a = np.zeros((9, 9))
    a[4, 4], a[3, 5] = 2.0, 1.0
    p = np.random.default_rng(6).random((3, 3))
    assert conv2d_same_centered(a, p).sum() == pytest.approx(a.sum() * p.sum(), rel=1e-12)


def test_maxpool_single_window():
    out, arg = maxpool(np.array([[1.0, 2.0], [3.0, 4.0]]), 2)
    assert out[0, 0, 0] == 4.0
    assert arg[0, 0, 0] == 3


def test_maxpool_ties_pick_lowest_index():
    x = np.full((4, 4, 1), 7.0)
    out, arg = maxpool(x, 2)
    assert np.all(out == 7.0)
    np.testing.assert_array_equal(arg[:, :, 0], [[0, 2], [8, 10]])


@pytest.mark.parametrize("seed", range(100))
def test_maxpool_matches_loops(seed):
    rng = np.random.default_rng(200 + seed)
    x = rng.normal(size=(8, 8, int(rng.integers(1, 3))))
    out, arg = maxpool(x, 2)
    np.testing.assert_array_equal(out, maxpool_loops(x, 2))
    np.testing.assert_array_equal(x.ravel()[arg], out)


def test_maxpool_replicates_remainder():
    x = np.arange(15, dtype=float).reshape(3, 5, 1)
    out, arg = maxpool(x, 2)
    assert out.shape == (2, 3, 1)
    # bottom-right window only holds the replicated corner value
    assert out[1, 2, 0] == 14.0
    np.testing.assert_array_equal(x.ravel()[arg], out)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 4, 2), elements=st.floats(0, 100)))
def test_maxpool_bounds(x):
    out, _ = maxpool(x, 2)
    assert out.max() <= x.max()
    assert out.sum() <= x.sum() + 1e-9


def test_maxpool_backward_routes_to_winner():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 5, 7, 3))
    out, arg = maxpool_batch(x, 2)
    d = rng.normal(size=out.shape)
    dx = maxpool_backward(d, arg, x.shape, 2)
    # adjoint identity: <pool(x) selection, d> == <x, dx> for the linear routing
    assert np.sum(out * d) == pytest.approx(np.sum(x * dx), rel=1e-12)


def test_upsample():
    np.testing.assert_array_equal(upsample_nearest(np.array([[1.0, 2.0]]), 2)[:, :, 0],
                                  [[1, 1, 2, 2], [1, 1, 2, 2]])
    x = np.random.default_rng(8).random((3, 4, 2))
    np.testing.assert_array_equal(upsample_nearest(x, 1), x)
    np.testing.assert_array_equal(upsample_nearest(x, 3)[::3, ::3], x)


def test_gaussian_smooth_commutes_with_reversal_exactly():
    h = np.random.default_rng(9).random((21, 17))
    s = gaussian_smooth(h, 2.5)
    assert np.array_equal(gaussian_smooth(h[::-1, ::-1], 2.5), s[::-1, ::-1])
    r = gaussian_smooth(h, 2.5, mode="reflect")
    assert np.array_equal(gaussian_smooth(h[::-1, ::-1], 2.5, mode="reflect"), r[::-1, ::-1])
    assert r.sum() == pytest.approx(h.sum(), rel=1e-12)


def test_rescale_geometry():
    x = np.random.default_rng(10).random((200, 200, 3))
    assert rescale(x, 1.0).shape == x.shape
    np.testing.assert_array_equal(rescale(x, 1.0), x)
    assert rescale(x, 0.5).shape == (100, 100, 3)


def test_rescale_preserves_mean_of_smooth_image():
    yy, xx = np.mgrid[0:200, 0:160] / 40.0
    img = (0.5 + 0.3 * np.sin(yy) * np.cos(xx))[:, :, None].repeat(3, axis=2)
    for s in (0.5, 0.621, 0.945, 1.25):
        assert abs(rescale(img, s).mean() - img.mean()) <= 0.02 * img.mean()
