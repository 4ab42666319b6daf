"""The numba kernels and their numpy twins must agree exactly."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trierec import _kernels as k

needs_numba = pytest.mark.skipif(not k.HAVE_NUMBA, reason="numba unavailable or disabled")


@needs_numba
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_tre_feature_index(B, T, L, seed):
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, 3, (B, T, L))
    lengths = rng.integers(1, T + 1, B)
    np.testing.assert_array_equal(k.np_tre_feature_index(codes, lengths),
                                  k.nb_tre_feature_index(codes, lengths))


@needs_numba
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_nearest_centroid(n, K, dim, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-2, 3, (n, dim)).astype(float)   # many exact ties
    c = rng.integers(-2, 3, (K, dim)).astype(float)
    i1, d1 = k.np_nearest_centroid(x, c)
    i2, d2 = k.nb_nearest_centroid(x, c)
    np.testing.assert_array_equal(i1, i2)
    np.testing.assert_array_equal(d1, d2)


@needs_numba
def test_scatter_add_rows():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 7, 200)
    src = rng.normal(size=(200, 5))
    np.testing.assert_allclose(k.np_scatter_add_rows(7, idx, src),
                               k.nb_scatter_add_rows(7, idx, src), rtol=1e-12, atol=1e-12)


@needs_numba
@pytest.mark.parametrize("shared", [False, True])
def test_bias_table_grad(shared):
    rng = np.random.default_rng(1)
    g = rng.normal(size=(3, 2, 6, 6))
    idx = rng.integers(0, 10, (6, 6) if shared else (3, 6, 6))
    np.testing.assert_allclose(k.np_bias_table_grad(g, idx, 10),
                               k.nb_bias_table_grad(g, idx, 10), rtol=1e-12, atol=1e-12)


@needs_numba
def test_gelu_twins_agree():
    x = np.linspace(-8, 8, 1001)
    for a, b in zip(k.np_gelu(x), k.nb_gelu(x)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_gelu_derivative_matches_central_difference():
    x = np.linspace(-5, 5, 101)
    h = 1e-6
    _, deriv = k.np_gelu(x)
    num = (k.np_gelu(x + h)[0] - k.np_gelu(x - h)[0]) / (2 * h)
    np.testing.assert_allclose(deriv, num, atol=1e-7)


def test_tre_index_sentinel_and_range():
    codes = np.array([[[0, 1], [0, 2], [5, 5]]])
    out = k.np_tre_feature_index(codes, np.array([2]))
    L = 2
    assert out.shape == (1, 6, 6)
    assert np.all(out[0, 4:, :] == (L + 1) ** 3)
    assert np.all(out[0, :, 4:] == (L + 1) ** 3)
    assert out[0, :4, :4].max() < (L + 1) ** 3


def test_backend_reflects_flag():
    assert k.BACKEND == ("numba" if k.HAVE_NUMBA else "numpy")
