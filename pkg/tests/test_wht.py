import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bbtquant import _accel
from bbtquant.wht import (
    fwht_normalized,
    hadamard_dense_transform,
    is_pow2,
    next_pow2,
    pad_columns,
    sylvester_hadamard,
)


@pytest.mark.parametrize("d, expected", [(576, 1024), (1, 1), (64, 64), (3, 4), (1025, 2048)])
def test_next_pow2(d, expected):
    assert next_pow2(d) == expected


def test_next_pow2_rejects_nonpositive():
    with pytest.raises(ValueError):
        next_pow2(0)


def test_is_pow2():
    assert [n for n in range(1, 20) if is_pow2(n)] == [1, 2, 4, 8, 16]


def test_fwht_of_unit_vector(each_backend):
    np.testing.assert_allclose(fwht_normalized(np.array([1.0, 0.0])), [0.70710678, 0.70710678], atol=1e-8)


def test_constant_vector_concentrates(each_backend):
    c = 2.5
    np.testing.assert_allclose(fwht_normalized(np.full(4, c)), [2 * c, 0, 0, 0], atol=1e-15)


@pytest.mark.parametrize("n", [3, 6, 100])
def test_non_power_of_two_length_rejected(n):
    with pytest.raises(ValueError, match="power-of-two"):
        fwht_normalized(np.ones(n))


def test_sylvester_recursion():
    H2 = sylvester_hadamard(2)
    np.testing.assert_array_equal(H2, [[1, 1], [1, -1]])
    H8 = sylvester_hadamard(8)
    np.testing.assert_array_equal(H8 @ H8.T, 8 * np.eye(8))
    np.testing.assert_array_equal(H8[:4, 4:], H8[:4, :4])
    np.testing.assert_array_equal(H8[4:, 4:], -H8[:4, :4])


@pytest.mark.parametrize("d", [2**k for k in range(11)])
def test_matches_dense_oracle(d, rng, each_backend):
    v = rng.standard_normal((10, d))
    fast = fwht_normalized(v)
    dense = hadamard_dense_transform(v)
    assert np.max(np.abs(fast - dense)) <= 1e-12 * np.max(np.abs(dense))


def test_backends_bit_identical(rng):
    if not _accel.HAS_NUMBA:
        pytest.skip("numba not installed")
    v = rng.standard_normal((7, 512))
    with _accel.backend("numba"):
        a = fwht_normalized(v)
    with _accel.backend("numpy"):
        b = fwht_normalized(v)
    np.testing.assert_array_equal(a, b)


def test_input_not_modified(rng):
    v = rng.standard_normal(16)
    keep = v.copy()
    fwht_normalized(v)
    np.testing.assert_array_equal(v, keep)


@settings(max_examples=60, deadline=None)
@given(
    k=st.integers(0, 12),
    seed=st.integers(0, 2**32 - 1),
)
def test_involution_and_energy(k, seed):
    v = np.random.default_rng(seed).standard_normal(2**k)
    h = fwht_normalized(v)
    back = fwht_normalized(h)
    scale = np.max(np.abs(v))
    assert np.max(np.abs(back - v)) <= 1e-12 * scale
    assert abs(np.linalg.norm(h) - np.linalg.norm(v)) <= 1e-12 * np.linalg.norm(v)


@given(arrays(np.float64, (3, 5), elements=st.floats(-1e6, 1e6)))
def test_pad_columns_preserves_rows(W):
    P = pad_columns(W)
    assert P.shape == (3, 8)
    np.testing.assert_array_equal(P[:, :5], W)
    np.testing.assert_array_equal(P[:, 5:], 0.0)
    assert [math.fsum(r) for r in P] == [math.fsum(r) for r in W]


def test_pad_columns_small_and_identity():
    W = np.arange(6.0).reshape(2, 3)
    P = pad_columns(W)
    np.testing.assert_array_equal(P, [[0, 1, 2, 0], [3, 4, 5, 0]])
    W4 = np.arange(8.0).reshape(2, 4)
    np.testing.assert_array_equal(pad_columns(W4), W4)


def test_pad_columns_rejects_narrow_target():
    with pytest.raises(ValueError):
        pad_columns(np.ones((2, 5)), 4)


@pytest.mark.parametrize("value, expected", [("1", "numpy"), ("0", "numba")])
def test_env_switch_selects_backend(value, expected):
    if expected == "numba" and not _accel.HAS_NUMBA:
        pytest.skip("numba not installed")
    code = "from bbtquant import _accel; print(_accel.backend_name())"
    env = dict(os.environ, BBT_DISABLE_NUMBA=value)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
