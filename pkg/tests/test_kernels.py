"""numba kernels against their numpy references."""
import numpy as np
import pytest

from seam import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not installed")


def test_round_half_away_ties():
    x = np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 0.49999997, -0.49999997])
    want = np.array([-3, -2, -1, 1, 2, 3, 0, 0], dtype=float)
    np.testing.assert_array_equal(K.round_half_away_np(x), want)
    np.testing.assert_array_equal(K.round_half_away(x), want)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_matches_numpy(rng, dtype):
    x = (rng.standard_normal(5000) * 10).astype(dtype)
    x[:100] = np.round(x[:100]) + 0.5
    np.testing.assert_array_equal(K.round_half_away(x), K.round_half_away_np(x))


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 3)])
def test_col2im_matches(rng, stride, pad, k):
    x_shape = (2, 3, 9, 9)
    ho = (9 + 2 * pad - k) // stride + 1
    cols = rng.standard_normal((2 * ho * ho, k * k * 3))
    a = K.col2im(cols, x_shape, k, k, stride, pad)
    b = K.col2im_np(cols, x_shape, k, k, stride, pad)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_col2im_is_im2col_adjoint(rng):
    # <im2col(x), c> == <x, col2im(c)>
    x = rng.standard_normal((2, 3, 7, 7))
    cols = K.im2col(x, 3, 3, 2, 1)
    c = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * c)
    rhs = np.sum(x * K.col2im(c, x.shape, 3, 3, 2, 1))
    assert abs(lhs - rhs) < 1e-9 * abs(lhs)


@pytest.mark.parametrize("stride", [1, 2])
def test_dwconv_matches(rng, stride):
    x = rng.standard_normal((2, 4, 8, 8))
    w = rng.standard_normal((4, 1, 3, 3))
    y = K.dwconv_forward(x, w, stride, 1)
    np.testing.assert_allclose(y, K.dwconv_forward_np(x, w, stride, 1), rtol=1e-12, atol=1e-12)
    g = rng.standard_normal(y.shape)
    dx, dw = K.dwconv_backward(x, w, g, stride, 1)
    dx2, dw2 = K.dwconv_backward_np(x, w, g, stride, 1)
    np.testing.assert_allclose(dx, dx2, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(dw, dw2, rtol=1e-10, atol=1e-10)


def test_mixed_act_quant_matches(rng):
    a = (rng.standard_normal((3, 4, 5, 5)) * 2).astype(np.float32)
    p = np.array([0.1, 0.2, 0.3, 0.4])
    q = [3, 7, 15, 63]
    np.testing.assert_allclose(K.mixed_act_quant(a, 2.0, q, p), K.mixed_act_quant_np(a, 2.0, q, p), atol=1e-6)
    g = rng.standard_normal(a.shape).astype(np.float32)
    np.testing.assert_allclose(K.mixed_act_quant_dp(a, g, 2.0, q), K.mixed_act_quant_dp_np(a, g, 2.0, q), rtol=1e-5)
