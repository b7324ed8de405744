import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from volterranet.tensor import (
    ConvGeometry,
    ShapeError,
    as_tensor4,
    axpy,
    channel_mean_var,
    col2im,
    col2im_batch,
    fill,
    flat_index,
    im2col,
    im2col_batch,
    map_elementwise,
    zeros,
)

from oracles import patch_at


def test_output_size_formula():
    g = ConvGeometry(3, 3, 3, stride=2, pad=1)
    assert g.output_hw(32, 32) == (16, 16)
    assert ConvGeometry(1, 3, 3).output_hw(5, 7) == (3, 5)


def test_output_below_one_is_rejected():
    with pytest.raises(ShapeError):
        ConvGeometry(1, 3, 3).output_hw(2, 8)


@pytest.mark.parametrize("bad", [dict(stride=0), dict(pad=-1), dict(kernel_h=0)])
def test_invalid_geometry(bad):
    args = dict(in_channels=1, kernel_h=3, kernel_w=3)
    args.update(bad)
    with pytest.raises(ValueError):
        ConvGeometry(**args)


def test_flat_index_is_row_major():
    shape = (2, 3, 4, 5)
    x = np.arange(np.prod(shape)).reshape(shape)
    assert x.ravel()[flat_index(shape, 1, 2, 3, 4)] == x[1, 2, 3, 4]
    with pytest.raises(IndexError):
        flat_index(shape, 2, 0, 0, 0)


def test_small_helpers():
    x = zeros(1, 2, 3, 3)
    assert x.shape == (1, 2, 3, 3) and not x.any()
    fill(x, 2.0)
    y = np.ones_like(x)
    assert_array_equal(axpy(0.5, x, y), 2.0)
    assert_array_equal(y, 1.0)  # operands untouched
    y = axpy(0.5, x, y)
    assert_array_equal(map_elementwise(np.square, y), 4.0)
    with pytest.raises(ShapeError):
        as_tensor4(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        axpy(1.0, x, np.zeros(3))


def test_channel_mean_var():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 5, 5))
    mean, var = channel_mean_var(x)
    assert_allclose(mean, x.mean(axis=(0, 2, 3)))
    assert_allclose(var, x.var(axis=(0, 2, 3)))


def test_im2col_worked_example():
    # 1 channel 3x3 image, 2x2 kernel, stride 1, no pad
    img = np.arange(9.0).reshape(1, 3, 3)
    cols = im2col(img, ConvGeometry(1, 2, 2))
    expected = np.array([[0, 1, 3, 4], [1, 2, 4, 5], [3, 4, 6, 7], [4, 5, 7, 8]], dtype=float)
    assert_array_equal(cols, expected)


def test_im2col_pads_with_zeros():
    img = np.ones((1, 2, 2))
    cols = im2col(img, ConvGeometry(1, 3, 3, pad=1))
    # corner patch of a 2x2 image sees 4 real pixels out of 9
    assert_array_equal(cols.sum(axis=0), [4, 4, 4, 4])


geoms = st.builds(
    lambda c, k, s, p, o: ConvGeometry(c, k, k, s, p, o),
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(0, 1), st.integers(1, 2),
)


@settings(max_examples=60, deadline=None)
@given(geom=geoms, h=st.integers(3, 7), w=st.integers(3, 7), seed=st.integers(0, 2**16))
def test_im2col_matches_direct_patches(geom, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((2, geom.in_channels, h, w))
    cols = im2col_batch(x, geom)
    ho, wo = geom.output_hw(h, w)
    for s in range(2):
        for p in range(ho):
            for q in range(wo):
                assert_array_equal(cols[s, :, p * wo + q], patch_at(x, geom, s, p, q))


@settings(max_examples=60, deadline=None)
@given(geom=geoms, h=st.integers(3, 7), w=st.integers(3, 7), seed=st.integers(0, 2**16))
def test_col2im_is_adjoint(geom, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, geom.in_channels, h, w))
    ho, wo = geom.output_hw(h, w)
    c = rng.standard_normal((2, geom.n, ho * wo))
    lhs = np.vdot(im2col_batch(x, geom), c)
    rhs = np.vdot(x, col2im_batch(c, geom, (h, w)))
    assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_col2im_counts_overlaps():
    geom = ConvGeometry(1, 3, 3, pad=1)
    ones = np.ones((geom.n, 16))
    counts = col2im(ones, geom, (4, 4))
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]], dtype=float)
    assert_array_equal(counts[0], expected)


def test_shape_errors():
    geom = ConvGeometry(3, 3, 3)
    with pytest.raises(ShapeError):
        im2col_batch(np.zeros((1, 2, 5, 5)), geom)
    with pytest.raises(ShapeError):
        col2im_batch(np.zeros((1, 27, 4)), geom, (5, 5))
    with pytest.raises(ShapeError):
        im2col(np.zeros((2, 3, 5, 5)), geom)
