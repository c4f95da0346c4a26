import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsrbnn.tensor import (
    DimensionError,
    ShapeMismatchError,
    as_tensor,
    col2im,
    conv2d,
    conv2d_direct,
    conv_out_dims,
    im2col,
    pool_out_dims,
)


@pytest.mark.parametrize("args, expected", [((30, 30, 3), (28, 28)), ((5, 5, 5), (1, 1)),
                                            ((13, 13, 3), (11, 11))])
def test_conv_out_dims(args, expected):
    assert conv_out_dims(*args) == expected


def test_conv_out_dims_too_small():
    with pytest.raises(DimensionError):
        conv_out_dims(2, 5, 3)


@pytest.mark.parametrize("args, expected", [((13, 13), (6, 6)), ((2, 2), (1, 1)), ((9, 9), (4, 4))])
def test_pool_out_dims(args, expected):
    assert pool_out_dims(*args) == expected


def test_pool_out_dims_too_small():
    with pytest.raises(DimensionError):
        pool_out_dims(1, 4)


@given(st.integers(2, 40), st.integers(2, 40), st.integers(1, 6))
def test_out_dims_monotone(h, w, k):
    if h >= k and w >= k:
        oh, ow = conv_out_dims(h, w, k)
        oh2, ow2 = conv_out_dims(h + 1, w + 1, k)
        assert oh2 >= oh and ow2 >= ow
    ph, pw = pool_out_dims(h, w)
    ph2, pw2 = pool_out_dims(h + 1, w + 1)
    assert ph2 >= ph and pw2 >= pw


def test_im2col_identity_kernel():
    x = np.array([1.0, 2.0, 3.0, 4.0], np.float32).reshape(1, 2, 2, 1)
    np.testing.assert_array_equal(im2col(x, 1), [[1], [2], [3], [4]])


def test_im2col_2x2_on_3x3():
    x = np.arange(1, 10, dtype=np.float32).reshape(1, 3, 3, 1)
    np.testing.assert_array_equal(
        im2col(x, 2), [[1, 2, 4, 5], [2, 3, 5, 6], [4, 5, 7, 8], [5, 6, 8, 9]])


def test_im2col_full_cover(rng):
    x = rng.normal(size=(3, 4, 4, 2)).astype(np.float32)
    np.testing.assert_array_equal(im2col(x, 4), x.reshape(3, -1))


def test_im2col_channel_order():
    # (kh, kw, c): channel varies fastest inside the patch
    x = np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2)
    np.testing.assert_array_equal(im2col(x, 2)[0], np.arange(8))


def test_im2col_dimension_error():
    with pytest.raises(DimensionError):
        im2col(np.zeros((1, 2, 2, 1), np.float32), 3)


def test_col2im_of_ones_counts_coverage():
    cols = np.ones((1 * 3 * 3, 2 * 2 * 1), np.float32)
    cover = col2im(cols, (1, 4, 4, 1), 2)[0, :, :, 0]
    expected = np.array([[1, 2, 2, 1], [2, 4, 4, 2], [2, 4, 4, 2], [1, 2, 2, 1]])
    np.testing.assert_array_equal(cover, expected)


def test_col2im_is_adjoint(rng):
    x = rng.normal(size=(2, 5, 6, 3))
    y = rng.normal(size=(2 * 3 * 4, 3 * 3 * 3))
    lhs = float((im2col(x, 3) * y).sum())
    rhs = float((x * col2im(y, x.shape, 3)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_col2im_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        col2im(np.ones((3, 4)), (1, 4, 4, 1), 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_conv_matches_direct_loop_exactly(seed, k, cin, f):
    rng = np.random.default_rng(seed)
    x = (rng.integers(0, 256, size=(2, k + 3, k + 2, cin)) / 255).astype(np.float32)
    w = np.where(rng.random((k, k, cin, f)) < 0.5, -1.0, 1.0).astype(np.float32)
    np.testing.assert_array_equal(conv2d(x, w, exact=True), conv2d_direct(x, w))


def test_conv_pm1_inputs_integer_exact(rng):
    x = np.where(rng.random((2, 7, 7, 5)) < 0.5, -1.0, 1.0).astype(np.float32)
    w = np.where(rng.random((3, 3, 5, 4)) < 0.5, -1.0, 1.0).astype(np.float32)
    np.testing.assert_array_equal(conv2d(x, w), conv2d_direct(x, w))


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatchError):
        conv2d(np.zeros((1, 4, 4, 2), np.float32), np.zeros((2, 2, 3, 1), np.float32))
    with pytest.raises(ShapeMismatchError):
        conv2d(np.zeros((4, 4, 2), np.float32), np.zeros((2, 2, 2, 1), np.float32))


def test_as_tensor_validates():
    assert as_tensor([[1, 2]]).dtype == np.float32
    with pytest.raises(ShapeMismatchError):
        as_tensor(np.zeros((1, 2, 3)))
    with pytest.raises(ShapeMismatchError):
        as_tensor(np.zeros((0, 2)))
