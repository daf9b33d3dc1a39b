"""The compiled kernels and the numpy fallback must agree."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdcreid import kernels

py = kernels.python_backend
cy = kernels.compiled_backend

needs_compiled = pytest.mark.skipif(cy is None, reason="compiled kernels not built")


def test_backend_names():
    assert py.BACKEND == "python"
    assert kernels.BACKEND in ("python", "cython")


geometry = st.tuples(
    st.integers(1, 2), st.integers(1, 3), st.integers(1, 7), st.integers(1, 7),
    st.integers(1, 3), st.integers(1, 2), st.integers(0, 1), st.integers(0, 10**6),
)


@needs_compiled
@settings(max_examples=60, deadline=None)
@given(geometry)
def test_im2col_col2im_agree(g):
    n, c, h, w, k, s, p, seed = g
    if h + 2 * p < k or w + 2 * p < k:
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, h, w))
    a = py.im2col(x, k, k, s, s, p, p)
    b = cy.im2col(x, k, k, s, s, p, p)
    assert np.array_equal(a, b)
    cols = rng.normal(size=a.shape)
    assert np.array_equal(py.col2im(cols, x.shape, k, k, s, s, p, p), cy.col2im(cols, x.shape, k, k, s, s, p, p))


@needs_compiled
@settings(max_examples=60, deadline=None)
@given(geometry)
def test_maxpool_agree(g):
    n, c, h, w, k, s, p, seed = g
    if p * 2 > k or h + 2 * p < k or w + 2 * p < k:
        return
    rng = np.random.default_rng(seed)
    x = rng.integers(-3, 3, size=(n, c, h, w)).astype(float)  # ties on purpose
    ya, ia = py.maxpool_forward(x, k, s, p)
    yb, ib = cy.maxpool_forward(x, k, s, p)
    assert np.array_equal(ya, yb) and np.array_equal(ia, ib)
    grad = rng.normal(size=ya.shape)
    assert np.array_equal(py.maxpool_backward(grad, ia, x.shape), cy.maxpool_backward(grad, ib, x.shape))


@needs_compiled
@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(2, 6), st.integers(2, 6), st.integers(1, 30), st.integers(0, 10**6))
def test_bilinear_agree(c, h, w, npts, seed):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(c, h, w))
    px = rng.uniform(-1.5, w + 0.5, npts)
    py_ = rng.uniform(-1.5, h + 0.5, npts)
    px[: npts // 3] = np.round(px[: npts // 3])  # lattice points and edges
    a = py.bilinear_forward(img, px, py_)
    b = cy.bilinear_forward(img, px, py_)
    assert np.allclose(a, b, rtol=0, atol=1e-14)
    grad = rng.normal(size=(c, npts))
    for u, v in zip(py.bilinear_backward(img, px, py_, grad), cy.bilinear_backward(img, px, py_, grad)):
        assert np.allclose(u, v, rtol=0, atol=1e-13)


def test_im2col_layout():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    cols = py.im2col(x, 2, 2, 1, 1, 0, 0)
    assert cols.shape == (1, 4, 4)
    assert cols[0, :, 0].tolist() == [0.0, 1.0, 3.0, 4.0]


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 4))
    cols = py.im2col(x, 3, 3, 2, 2, 1, 1)
    y = rng.normal(size=cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * py.col2im(y, x.shape, 3, 3, 2, 2, 1, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_bilinear_out_of_range_is_zero():
    img = np.ones((1, 3, 3))
    out = py.bilinear_forward(img, np.array([-0.5, 2.5, 1.0]), np.array([1.0, 1.0, 3.1]))
    assert out.tolist() == [[0.0, 0.0, 0.0]]
    gimg, gx, gy = py.bilinear_backward(img, np.array([-0.5]), np.array([1.0]), np.ones((1, 1)))
    assert not gimg.any() and gx[0] == 0 and gy[0] == 0
