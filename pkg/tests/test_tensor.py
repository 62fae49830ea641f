import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minconv.errors import DimensionError
from minconv.tensor import Shape2D, col2im, conv2d, im2col, matmul, unfold
from oracles import direct_conv, gather_unfold, triple_matmul


def test_unfold_single_pixel():
    rows = unfold(np.array([[[7.5]]]), Shape2D(1, 1))
    assert rows.shape == (1, 1) and rows[0, 0] == 7.5


def test_unfold_constant_image():
    rows = unfold(np.ones((1, 3, 3)), Shape2D(2, 2))
    np.testing.assert_array_equal(rows, np.ones((4, 4)))


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
def test_unfold_matches_gather(rng, stride, pad):
    x = rng.standard_normal((2, 4, 4))
    got = unfold(x, Shape2D(3, 3, stride, pad))
    np.testing.assert_array_equal(got, gather_unfold(x, 3, 3, stride, pad))


def test_unfold_rejects_small_input():
    with pytest.raises(DimensionError):
        unfold(np.zeros((1, 2, 2)), Shape2D(3, 3))
    with pytest.raises(DimensionError):
        unfold(np.zeros((2, 2)), Shape2D(1, 1))


def test_shape2d_validation():
    for bad in [(0, 1), (1, 1, 0), (1, 1, 1, -1)]:
        with pytest.raises(DimensionError):
            Shape2D(*bad)
    assert Shape2D.same(5) == Shape2D(5, 5, 1, 2)
    with pytest.raises(DimensionError):
        Shape2D.same(4)


def test_matmul_examples(rng):
    a = rng.standard_normal((4, 4))
    np.testing.assert_array_equal(matmul(np.eye(4), a), a)
    np.testing.assert_array_equal(matmul(np.array([[1.0, 2], [3, 4]]), np.array([[1.0], [1]])), [[3], [7]])
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(matmul(a, b), triple_matmul(a.tolist(), b.tolist()), atol=1e-12)
    with pytest.raises(DimensionError):
        matmul(a, a)


@settings(max_examples=40, deadline=None)
@given(
    c=st.integers(1, 4), h=st.integers(3, 8), w=st.integers(3, 8), cout=st.integers(1, 3),
    f=st.sampled_from([1, 2, 3]), pad=st.integers(0, 1), stride=st.integers(1, 2), seed=st.integers(0, 2**31),
)
def test_conv2d_matches_direct_loops(c, h, w, cout, f, pad, stride, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, c, h, w))
    wt = r.standard_normal((cout, c, f, f))
    b = r.standard_normal(cout)
    got = conv2d(x, wt, Shape2D(f, f, stride, pad), b)
    np.testing.assert_allclose(got, direct_conv(x, wt, stride, pad, b), atol=1e-9)


def test_unfold_is_linear(rng):
    s = Shape2D(3, 3, 1, 1)
    x, y = rng.standard_normal((2, 3, 6, 5))
    np.testing.assert_allclose(unfold(2.5 * x - 0.5 * y, s), 2.5 * unfold(x, s) - 0.5 * unfold(y, s), atol=1e-12)


@pytest.mark.parametrize("s", [Shape2D(3, 3, 1, 1), Shape2D(2, 3, 2, 0), Shape2D(5, 5, 1, 2), Shape2D(1, 1)])
def test_col2im_is_adjoint_of_im2col(rng, backend, s):
    x = rng.standard_normal((2, 3, 9, 8))
    cols = im2col(x, s)
    g = rng.standard_normal(cols.shape)
    # <im2col(x), g> == <x, col2im(g)>
    assert np.isclose((cols * g).sum(), (x * col2im(g, x.shape, s)).sum(), rtol=1e-12)


def test_col2im_shape_check():
    with pytest.raises(DimensionError):
        col2im(np.zeros((3, 3)), (1, 1, 4, 4), Shape2D(3, 3))
