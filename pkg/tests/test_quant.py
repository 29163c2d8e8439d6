import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbtquant import _accel
from bbtquant.quant import (
    QuantizedTensor,
    UnsupportedBitWidthError,
    dequantize,
    pack_codes,
    quant_mse,
    quantize_groupwise,
    reconstruction_objective,
    signround_refine,
    unpack_codes,
)


def ulp_bound(W, W_hat, qt):
    scale = np.repeat(qt.scales.astype(np.float64), qt.group_size, axis=1)[:, : W.shape[1]]
    ulp = np.spacing(np.maximum(np.abs(W), np.abs(W_hat)))
    return np.abs(W_hat - W) <= scale / 2 + ulp


# ---- packing ---------------------------------------------------------------

def test_pack_lsb_first(each_backend):
    out = pack_codes(np.array([1, 2, 3, 0]), 2)
    assert out.tobytes() == b"\x39"
    assert pack_codes(np.array([0xA, 0x3]), 4).tobytes() == b"\x3a"


def test_pack_empty(each_backend):
    assert pack_codes(np.array([], dtype=np.uint8), 2).size == 0
    assert unpack_codes(np.array([], dtype=np.uint8), 4, 0).size == 0


def test_pack_partial_byte(each_backend):
    out = pack_codes(np.array([3, 3, 1]), 2)
    np.testing.assert_array_equal(out, [0b01_11_11])


@pytest.mark.parametrize("fn", [lambda: pack_codes(np.zeros(4), 3),
                                lambda: unpack_codes(np.zeros(1, np.uint8), 3, 2),
                                lambda: quantize_groupwise(np.zeros((2, 4)), bits=3)])
def test_three_bits_rejected(fn):
    with pytest.raises(UnsupportedBitWidthError, match="3-bit"):
        fn()


def test_pack_rejects_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        pack_codes(np.array([0, 4]), 2)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([2, 4]), st.integers(0, 300), st.integers(0, 2**32 - 1))
def test_pack_round_trip(bits, n, seed):
    codes = np.random.default_rng(seed).integers(0, 1 << bits, n).astype(np.uint8)
    packed = pack_codes(codes, bits)
    assert packed.size == -(-n * bits // 8)
    np.testing.assert_array_equal(unpack_codes(packed, bits, n), codes)


def test_pack_backends_agree(rng):
    if not _accel.HAS_NUMBA:
        pytest.skip("numba not installed")
    for bits in (2, 4):
        codes = rng.integers(0, 1 << bits, 1001).astype(np.uint8)
        with _accel.backend("numba"):
            a = pack_codes(codes, bits)
        with _accel.backend("numpy"):
            b = pack_codes(codes, bits)
        np.testing.assert_array_equal(a, b)


# ---- quantize / dequantize -------------------------------------------------

def test_hand_group():
    qt = quantize_groupwise(np.array([[0.0, 1.0, 2.0, 3.0]]), bits=2, group_size=4)
    assert qt.scales[0, 0] == 1.0
    assert qt.zero_points[0, 0] == 0
    np.testing.assert_array_equal(qt.code_matrix()[0], [0, 1, 2, 3])
    np.testing.assert_array_equal(dequantize(qt), [[0, 1, 2, 3]])


def test_all_equal_group():
    c = -0.7321
    qt = quantize_groupwise(np.full((1, 8), c), bits=4, group_size=8)
    assert qt.scales[0, 0] == 1.0
    assert qt.zero_points[0, 0] == 0
    np.testing.assert_array_equal(qt.code_matrix(), 0)
    np.testing.assert_array_equal(dequantize(qt), np.float32(c))


def test_zero_matrix():
    qt = quantize_groupwise(np.zeros((3, 70)), bits=2)
    np.testing.assert_array_equal(dequantize(qt), 0.0)


def test_default_group_is_64():
    assert quantize_groupwise(np.ones((1, 128))).group_size == 64


def test_tail_group_padding():
    W = np.arange(10.0).reshape(2, 5) - 4
    qt = quantize_groupwise(W, bits=4, group_size=4)
    assert qt.n_groups == 2
    codes = qt.code_matrix()
    assert codes.shape == (2, 8)
    np.testing.assert_array_equal(codes[:, 5:], 0)
    assert dequantize(qt).shape == (2, 5)
    assert np.all(ulp_bound(W, dequantize(qt), qt))


def test_non_finite_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        quantize_groupwise(np.array([[1.0, np.nan]]))


def test_corrupted_zero_point_rejected():
    qt = quantize_groupwise(np.array([[-1.0, 0.5, 1.0, 2.0]]), bits=2, group_size=4)
    qt.zero_points[0, 0] = 9
    with pytest.raises(ValueError, match="corrupted"):
        dequantize(qt)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([2, 4]), st.integers(1, 3), st.integers(1, 130), st.integers(1, 64),
       st.floats(-5, 5), st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_rtn_bound(bits, d_out, d_in, group, shift, spread, seed):
    W = shift + spread * np.random.default_rng(seed).standard_normal((d_out, d_in))
    qt = quantize_groupwise(W, bits, group)
    W_hat = dequantize(qt)
    assert np.all(ulp_bound(W, W_hat, qt))
    codes = qt.code_matrix()
    assert codes.max() <= (1 << bits) - 1
    assert np.all(qt.scales > 0)


def test_rtn_bound_random_64_wide_groups(rng):
    W = rng.uniform(-1, 1, (256, 64))
    qt = quantize_groupwise(W, 4, 64)
    assert np.all(ulp_bound(W, dequantize(qt), qt))


@pytest.mark.parametrize("bits", [2, 4])
def test_requantize_is_fixed_point(bits, rng):
    W = rng.standard_normal((16, 96)) + np.linspace(-2, 2, 96)
    qt = quantize_groupwise(W, bits, 32)
    again = quantize_groupwise(dequantize(qt), bits, 32)
    np.testing.assert_array_equal(again.code_matrix(), qt.code_matrix())
    np.testing.assert_array_equal(dequantize(again), dequantize(qt))


def test_four_bits_beats_two_bits(rng):
    W = rng.uniform(-1, 1, (64, 256))
    X = rng.standard_normal((512, 256))
    y = X @ W.T

    def err(bits):
        return np.linalg.norm(X @ dequantize(quantize_groupwise(W, bits)).T - y) / np.linalg.norm(y)

    assert err(4) < err(2)


def test_quant_mse_matches_definition(rng):
    W = rng.standard_normal((4, 64))
    qt = quantize_groupwise(W, 2)
    assert quant_mse(W, qt) == pytest.approx(np.mean((dequantize(qt) - W) ** 2))


# ---- refinement ------------------------------------------------------------

def test_refine_zero_passes_is_identity(rng):
    W = rng.standard_normal((4, 16))
    qt = quantize_groupwise(W, 2, 8)
    out = signround_refine(qt, W, rng.standard_normal((32, 16)), max_passes=0)
    np.testing.assert_array_equal(out.codes, qt.codes)


@pytest.mark.parametrize("bits", [2, 4])
def test_refine_never_increases_objective(bits, each_backend):
    rng = np.random.default_rng(bits)
    for trial in range(10):
        W = rng.standard_normal((8, 40))
        X = rng.standard_normal((24, 40)) * rng.uniform(0.1, 3, 40)
        qt = quantize_groupwise(W, bits, 16)
        before = reconstruction_objective(dequantize(qt), W, X)
        prev = before
        for passes in (1, 2, 4):
            obj = reconstruction_objective(dequantize(signround_refine(qt, W, X, passes)), W, X)
            assert obj <= prev * (1 + 1e-12)
            prev = obj
        assert prev <= before


def test_refine_backends_identical(rng):
    if not _accel.HAS_NUMBA:
        pytest.skip("numba not installed")
    W = rng.standard_normal((12, 70))
    X = rng.standard_normal((40, 70))
    qt = quantize_groupwise(W, 2, 32)
    with _accel.backend("numba"):
        a = signround_refine(qt, W, X, 3)
    with _accel.backend("numpy"):
        b = signround_refine(qt, W, X, 3)
    np.testing.assert_array_equal(a.codes, b.codes)


def _single_flip_improves(qt, W, X):
    codes = qt.code_matrix()
    base = reconstruction_objective(dequantize(qt), W, X)
    q = (1 << qt.bits) - 1
    d_out, d_in = qt.shape
    for r, j, dc in itertools.product(range(d_out), range(d_in), (1, -1)):
        c = int(codes[r, j]) + dc
        if not 0 <= c <= q:
            continue
        trial = codes.copy()
        trial[r, j] = c
        cand = QuantizedTensor(pack_codes(trial, qt.bits), qt.bits, qt.group_size, qt.scales,
                               qt.zero_points, qt.group_offsets, qt.shape)
        obj = reconstruction_objective(dequantize(cand), W, X)
        if obj < base - 1e-9 * base:
            return True
    return False


@pytest.mark.parametrize("seed", range(5))
def test_refine_reaches_single_flip_local_optimum(seed, each_backend):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((4, 8))
    X = rng.standard_normal((16, 8)) * rng.uniform(0.2, 2, 8)
    qt = quantize_groupwise(W, 2, 4)
    refined = signround_refine(qt, W, X, max_passes=100)
    assert not _single_flip_improves(refined, W, X)


def test_refine_input_validation(rng):
    W = rng.standard_normal((2, 8))
    qt = quantize_groupwise(W, 2, 8)
    with pytest.raises(ValueError, match="non-empty"):
        signround_refine(qt, W, np.zeros((0, 8)))
    with pytest.raises(ValueError, match="width"):
        signround_refine(qt, W, np.ones((3, 7)))
