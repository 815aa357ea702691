import numpy as np
import pytest

from sparseagg import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not installed")

CONV_CASES = [
    # (n, c, h, w, kh, kw, stride) with h, w already padded
    (2, 3, 8, 8, 3, 3, 1),
    (1, 4, 7, 7, 3, 3, 2),
    (2, 2, 5, 5, 1, 1, 1),
    (1, 1, 9, 9, 5, 5, 2),
    (3, 5, 6, 6, 2, 2, 2),
]

POOL_CASES = [
    # (n, c, h, w, kernel, stride, padding)
    (2, 3, 8, 8, 2, 2, 0),
    (1, 2, 7, 7, 3, 2, 1),
    (2, 1, 5, 5, 3, 1, 1),
    (1, 4, 6, 6, 2, 2, 1),
]


def out_size(h, k, stride):
    return (h - k) // stride + 1


def im2col_ref(x, kh, kw, stride, oh, ow):
    n, c, _, _ = x.shape
    cols = np.zeros((c * kh * kw, n * oh * ow), dtype=x.dtype)
    for ci in range(c):
        for ky in range(kh):
            for kx in range(kw):
                r = (ci * kh + ky) * kw + kx
                for ni in range(n):
                    for oy in range(oh):
                        for ox in range(ow):
                            m = (ni * oh + oy) * ow + ox
                            cols[r, m] = x[ni, ci, oy * stride + ky, ox * stride + kx]
    return cols


@pytest.mark.parametrize("n,c,h,w,kh,kw,stride", CONV_CASES)
def test_im2col_matches_reference(n, c, h, w, kh, kw, stride):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, h, w))
    oh, ow = out_size(h, kh, stride), out_size(w, kw, stride)
    np.testing.assert_array_equal(K.im2col_numpy(x, kh, kw, stride, oh, ow),
                                  im2col_ref(x, kh, kw, stride, oh, ow))


@needs_numba
@pytest.mark.parametrize("n,c,h,w,kh,kw,stride", CONV_CASES)
def test_im2col_backends_agree(n, c, h, w, kh, kw, stride):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    oh, ow = out_size(h, kh, stride), out_size(w, kw, stride)
    np.testing.assert_array_equal(K.im2col_numpy(x, kh, kw, stride, oh, ow),
                                  K.im2col_numba(x, kh, kw, stride, oh, ow))


@needs_numba
@pytest.mark.parametrize("n,c,h,w,kh,kw,stride", CONV_CASES)
def test_col2im_backends_agree(n, c, h, w, kh, kw, stride):
    rng = np.random.default_rng(2)
    oh, ow = out_size(h, kh, stride), out_size(w, kw, stride)
    cols = rng.standard_normal((c * kh * kw, n * oh * ow))
    a = K.col2im_numpy(cols, (n, c, h, w), kh, kw, stride, oh, ow)
    b = K.col2im_numba(cols, (n, c, h, w), kh, kw, stride, oh, ow)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)


@pytest.mark.parametrize("n,c,h,w,kh,kw,stride", CONV_CASES)
def test_col2im_is_adjoint_of_im2col(n, c, h, w, kh, kw, stride):
    # <im2col(x), cols> == <x, col2im(cols)> pins scatter against gather
    rng = np.random.default_rng(3)
    x = rng.standard_normal((n, c, h, w))
    oh, ow = out_size(h, kh, stride), out_size(w, kw, stride)
    cols = rng.standard_normal((c * kh * kw, n * oh * ow))
    lhs = float(np.sum(K.im2col(x, kh, kw, stride, oh, ow) * cols))
    rhs = float(np.sum(x * K.col2im(cols, (n, c, h, w), kh, kw, stride, oh, ow)))
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


def test_pointwise_round_trip_is_identity():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 5, 5))
    cols = K.im2col(x, 1, 1, 1, 5, 5)
    np.testing.assert_array_equal(K.col2im(cols, x.shape, 1, 1, 1, 5, 5), x)


def test_col2im_counts_patch_coverage():
    h = w = 4
    oh = ow = out_size(h, 3, 1)
    cols = np.ones((1 * 3 * 3, 1 * oh * ow))
    cover = K.col2im_numpy(cols, (1, 1, h, w), 3, 3, 1, oh, ow)[0, 0]
    expected = np.array([[1, 2, 2, 1],
                         [2, 4, 4, 2],
                         [2, 4, 4, 2],
                         [1, 2, 2, 1]], dtype=float)
    np.testing.assert_array_equal(cover, expected)


def maxpool_ref(x, kernel, stride, padding):
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    out = np.full((n, c, oh, ow), -np.inf, dtype=x.dtype)
    arg = np.zeros((n, c, oh, ow), dtype=np.int64)
    for ni in range(n):
        for ci in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    for ky in range(kernel):
                        for kx in range(kernel):
                            y = oy * stride + ky - padding
                            xq = ox * stride + kx - padding
                            if 0 <= y < h and 0 <= xq < w:
                                v = x[ni, ci, y, xq]
                                if v > out[ni, ci, oy, ox]:
                                    out[ni, ci, oy, ox] = v
                                    arg[ni, ci, oy, ox] = ky * kernel + kx
    return out, arg


@pytest.mark.parametrize("n,c,h,w,kernel,stride,padding", POOL_CASES)
def test_maxpool_forward_matches_reference(n, c, h, w, kernel, stride, padding):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((n, c, h, w))
    out, arg = K.maxpool_forward_numpy(x, kernel, stride, padding)
    ref_out, ref_arg = maxpool_ref(x, kernel, stride, padding)
    np.testing.assert_array_equal(out, ref_out)
    np.testing.assert_array_equal(arg, ref_arg)


@needs_numba
@pytest.mark.parametrize("n,c,h,w,kernel,stride,padding", POOL_CASES)
def test_maxpool_backends_agree(n, c, h, w, kernel, stride, padding):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    out_a, arg_a = K.maxpool_forward_numpy(x, kernel, stride, padding)
    out_b, arg_b = K.maxpool_forward_numba(x, kernel, stride, padding)
    np.testing.assert_array_equal(out_a, out_b)
    np.testing.assert_array_equal(arg_a, arg_b)

    grad = rng.standard_normal(out_a.shape).astype(np.float64)
    dx_a = K.maxpool_backward_numpy(grad, arg_a, x.shape, kernel, stride, padding)
    dx_b = K.maxpool_backward_numba(grad, arg_a, x.shape, kernel, stride, padding)
    np.testing.assert_allclose(dx_a, dx_b, rtol=1e-12, atol=0)


def test_maxpool_ties_pick_first_window_slot():
    x = np.ones((1, 1, 4, 4))
    _, arg = K.maxpool_forward(x, 2, 2, 0)
    assert np.all(arg == 0)


def test_maxpool_backward_routes_to_argmax_only():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out, arg = K.maxpool_forward(x, 2, 2, 0)
    np.testing.assert_array_equal(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])
    dx = K.maxpool_backward(np.ones_like(out), arg, x.shape, 2, 2, 0)
    assert dx.sum() == 4.0
    assert dx[0, 0, 1, 1] == 1.0 and dx[0, 0, 3, 3] == 1.0
    assert dx[0, 0, 0, 0] == 0.0


def test_kernels_preserve_dtype():
    x32 = np.ones((1, 1, 4, 4), dtype=np.float32)
    x64 = np.ones((1, 1, 4, 4), dtype=np.float64)
    assert K.im2col(x32, 3, 3, 1, 2, 2).dtype == np.float32
    assert K.im2col(x64, 3, 3, 1, 2, 2).dtype == np.float64
    assert K.maxpool_forward(x32, 2, 2, 0)[0].dtype == np.float32


def test_active_backend_reports_dispatch():
    assert K.active_backend() in ("numpy", "numba")
    assert K.active_backend() == ("numba" if K._USE_NUMBA else "numpy")
    if K._USE_NUMBA:
        assert K.im2col is K._im2col_routed
        assert K.col2im is K._col2im_routed
    else:
        assert K.im2col is K.im2col_numpy
        assert K.col2im is K.col2im_numpy
