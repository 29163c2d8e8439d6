"""Group-wise 2/4-bit weight quantization with bit-exact packing.

Groups run along the input dimension. Within a group the grid is asymmetric
min-max round-to-nearest::

    scale = (max - min) / (2**bits - 1)      (stored as float32, rounded up)
    zero_point = clip(rint(-min / scale), 0, 2**bits - 1)
    code = clip(rint((w - offset) / scale) + zero_point, 0, 2**bits - 1)
    w_hat = (code - zero_point) * scale + offset

``offset`` is zero whenever the group straddles zero. All-equal groups store
``scale=1, zero_point=0, code=0`` and the common value as ``offset``; groups
that do not contain zero use the same offset mechanism with ``offset=min`` so
every weight stays on the grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bbtquant import _accel

SUPPORTED_BITS = (2, 4)


class UnsupportedBitWidthError(ValueError):
    """Raised for bit widths without a regular byte packing (e.g. 3)."""


def _check_bits(bits: int) -> int:
    bits = int(bits)
    if bits not in SUPPORTED_BITS:
        raise UnsupportedBitWidthError(
            f"{bits}-bit codes are not supported; packing is defined only for 2 and 4 bits"
        )
    return bits


# --------------------------------------------------------------------------
# packing
# --------------------------------------------------------------------------

@_accel.njit(cache=True)
def _pack_numba(codes, bits, out):
    per = 8 // bits
    for i in range(codes.shape[0]):
        out[i // per] |= np.uint8(codes[i] << (bits * (i % per)))


@_accel.njit(cache=True)
def _unpack_numba(data, bits, n, out):
    per = 8 // bits
    mask = (1 << bits) - 1
    for i in range(n):
        out[i] = (data[i // per] >> (bits * (i % per))) & mask


def pack_codes(codes, bits: int) -> np.ndarray:
    """Pack codes LSB-first: four per byte at 2 bits, two per byte at 4 bits."""
    bits = _check_bits(bits)
    codes = np.ascontiguousarray(codes).reshape(-1)
    if codes.size and (codes.min() < 0 or codes.max() > (1 << bits) - 1):
        raise ValueError(f"codes out of range for {bits}-bit packing")
    codes = codes.astype(np.uint8)
    per = 8 // bits
    n_bytes = -(-codes.size // per)
    if _accel.use_numba():
        out = np.zeros(n_bytes, dtype=np.uint8)
        _pack_numba(codes, bits, out)
        return out
    padded = np.zeros(n_bytes * per, dtype=np.uint8)
    padded[: codes.size] = codes
    shifts = (np.arange(per, dtype=np.uint8) * bits).astype(np.uint8)
    return np.bitwise_or.reduce(padded.reshape(n_bytes, per) << shifts, axis=1).astype(np.uint8)


def unpack_codes(data, bits: int, n: int) -> np.ndarray:
    bits = _check_bits(bits)
    data = np.ascontiguousarray(data, dtype=np.uint8).reshape(-1)
    per = 8 // bits
    if n > data.size * per:
        raise ValueError(f"cannot unpack {n} codes from {data.size} bytes")
    if _accel.use_numba():
        out = np.empty(n, dtype=np.uint8)
        _unpack_numba(data, bits, n, out)
        return out
    shifts = (np.arange(per, dtype=np.uint8) * bits).astype(np.uint8)
    mask = np.uint8((1 << bits) - 1)
    return ((data[:, None] >> shifts) & mask).reshape(-1)[:n]


# --------------------------------------------------------------------------
# quantize / dequantize
# --------------------------------------------------------------------------

@dataclass
class QuantizedTensor:
    codes: np.ndarray         # packed uint8, row-major, d_out x (n_groups * group_size) logical
    bits: int
    group_size: int
    scales: np.ndarray        # float32, d_out x n_groups
    zero_points: np.ndarray   # uint8, d_out x n_groups
    group_offsets: np.ndarray # float32, d_out x n_groups
    shape: tuple[int, int]

    @property
    def n_groups(self) -> int:
        return -(-self.shape[1] // self.group_size)

    @property
    def padded_cols(self) -> int:
        return self.n_groups * self.group_size

    def code_matrix(self) -> np.ndarray:
        """Unpacked codes, d_out x padded_cols."""
        d_out = self.shape[0]
        n = d_out * self.padded_cols
        return unpack_codes(self.codes, self.bits, n).reshape(d_out, self.padded_cols)


def _f32_up(x: np.ndarray) -> np.ndarray:
    r = x.astype(np.float32)
    low = r.astype(np.float64) < x
    r[low] = np.nextafter(r[low], np.float32(np.inf))
    return r


def _f32_down(x: np.ndarray) -> np.ndarray:
    r = x.astype(np.float32)
    high = r.astype(np.float64) > x
    r[high] = np.nextafter(r[high], np.float32(-np.inf))
    return r


def _group_view(W: np.ndarray, group_size: int, fill: float) -> np.ndarray:
    d_out, d_in = W.shape
    n_groups = -(-d_in // group_size)
    padded = np.full((d_out, n_groups * group_size), fill, dtype=np.float64)
    padded[:, :d_in] = W
    return padded.reshape(d_out, n_groups, group_size)


def quantize_groupwise(W, bits: int = 2, group_size: int = 64) -> QuantizedTensor:
    bits = _check_bits(bits)
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"expected a 2-D weight, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValueError("weight contains non-finite values")
    d_out, d_in = W.shape
    q = (1 << bits) - 1
    n_groups = -(-d_in // group_size)
    if d_out == 0 or d_in == 0:
        empty = np.zeros((d_out, n_groups))
        return QuantizedTensor(
            codes=np.zeros(0, dtype=np.uint8), bits=bits, group_size=group_size,
            scales=empty.astype(np.float32), zero_points=empty.astype(np.uint8),
            group_offsets=empty.astype(np.float32), shape=(d_out, d_in),
        )

    mn = _group_view(W, group_size, np.inf).min(axis=2)
    mx = _group_view(W, group_size, -np.inf).max(axis=2)
    degenerate = mx == mn
    straddle = (mn <= 0.0) & (mx >= 0.0) & ~degenerate

    offsets = np.where(straddle, np.float32(0.0), _f32_down(mn))
    offsets[degenerate] = mn[degenerate].astype(np.float32)
    span = np.where(straddle, mx - mn, mx - offsets.astype(np.float64))
    scales = _f32_up(span / q)
    scales[degenerate] = np.float32(1.0)

    s64 = scales.astype(np.float64)
    zp = np.where(straddle, np.clip(np.rint(-mn / s64), 0, q), 0.0)

    Wg = _group_view(W, group_size, 0.0)
    raw = np.rint((Wg - offsets.astype(np.float64)[:, :, None]) / s64[:, :, None]) + zp[:, :, None]
    codes = np.clip(raw, 0, q).astype(np.uint8).reshape(d_out, -1)
    codes[:, d_in:] = 0

    return QuantizedTensor(
        codes=pack_codes(codes, bits), bits=bits, group_size=group_size,
        scales=scales, zero_points=zp.astype(np.uint8), group_offsets=offsets.astype(np.float32),
        shape=(d_out, d_in),
    )


def _dequant_codes(codes: np.ndarray, qt: QuantizedTensor) -> np.ndarray:
    d_out, d_in = qt.shape
    g = codes.reshape(d_out, qt.n_groups, qt.group_size).astype(np.float64)
    zp = qt.zero_points.astype(np.float64)[:, :, None]
    s = qt.scales.astype(np.float64)[:, :, None]
    off = qt.group_offsets.astype(np.float64)[:, :, None]
    return ((g - zp) * s + off).reshape(d_out, -1)[:, :d_in]


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    d_out, d_in = qt.shape
    if d_out == 0 or d_in == 0:
        return np.zeros(qt.shape)
    codes = qt.code_matrix()
    if codes.max(initial=0) > (1 << qt.bits) - 1:
        raise ValueError("corrupted codes: value out of range")
    if np.any(qt.zero_points > (1 << qt.bits) - 1):
        raise ValueError("corrupted zero point: value out of range")
    return _dequant_codes(codes, qt)


# --------------------------------------------------------------------------
# greedy sign refinement
# --------------------------------------------------------------------------

_ACCEPT_RTOL = 1e-9


@_accel.njit(cache=True)
def _refine_pass_numba(codes, E, V, G, step, active, q, rtol):
    d_out, d_in = E.shape
    flips = np.zeros(d_out, dtype=np.int64)
    for r in range(d_out):
        if not active[r]:
            continue
        for j in range(d_in):
            gjj = G[j, j]
            vj = V[r, j]
            s = step[r, j]
            c = codes[r, j]
            for dc in (1, -1):
                nc = c + dc
                if nc < 0 or nc > q:
                    continue
                delta = dc * s
                lin = 2.0 * delta * vj
                quad = delta * delta * gjj
                if lin + quad < -rtol * (abs(lin) + quad):
                    codes[r, j] = nc
                    E[r, j] += delta
                    for k in range(d_in):
                        V[r, k] += delta * G[j, k]
                    flips[r] += 1
                    break
    return flips


def _refine_pass_numpy(codes, E, V, G, step, active, q, rtol):
    d_out, d_in = E.shape
    flips = np.zeros(d_out, dtype=np.int64)
    rows = np.flatnonzero(active)
    for j in range(d_in):
        gjj = G[j, j]
        c = codes[rows, j]
        vj = V[rows, j]
        s = step[rows, j]
        delta = np.zeros(rows.size)
        chosen = np.zeros(rows.size, dtype=bool)
        for dc in (1, -1):
            nc = c + dc
            d = dc * s
            lin = 2.0 * d * vj
            quad = d * d * gjj
            ok = ~chosen & (nc >= 0) & (nc <= q) & (lin + quad < -rtol * (np.abs(lin) + quad))
            delta[ok] = d[ok]
            codes[rows[ok], j] = nc[ok]
            chosen |= ok
        if not chosen.any():
            continue
        acc = rows[chosen]
        dl = delta[chosen]
        E[acc, j] += dl
        V[acc] += dl[:, None] * G[j]
        flips[acc] += 1
    return flips


def reconstruction_objective(W_hat, W, X) -> float:
    """``||(W_hat - W) X^T||_F^2``."""
    X = np.asarray(X, dtype=np.float64)
    return float(np.sum(((np.asarray(W_hat) - np.asarray(W)) @ X.T) ** 2))


def signround_refine(qt: QuantizedTensor, W, calib, max_passes: int = 1) -> QuantizedTensor:
    """Greedy +-1 code flips that strictly lower ``||(W_hat - W) X^T||_F``.

    Coordinates are visited row-major, left to right; ``+1`` is tried before
    ``-1``. Rows stop after ``max_passes`` sweeps or a sweep with no accepted
    flip. Rows do not interact, so this equals a global sweep loop.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(calib, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("signround_refine needs a non-empty calibration batch")
    if W.shape != tuple(qt.shape):
        raise ValueError(f"weight shape {W.shape} != quantized shape {qt.shape}")
    if X.shape[1] != W.shape[1]:
        raise ValueError(f"calibration width {X.shape[1]} != d_in {W.shape[1]}")
    d_out, d_in = qt.shape
    if max_passes <= 0 or d_out == 0 or d_in == 0:
        return qt

    q = (1 << qt.bits) - 1
    codes = np.ascontiguousarray(qt.code_matrix()[:, :d_in].astype(np.int64))
    step = np.ascontiguousarray(
        np.repeat(qt.scales.astype(np.float64), qt.group_size, axis=1)[:, :d_in]
    )
    padded = np.zeros((d_out, qt.padded_cols), dtype=np.int64)
    padded[:, :d_in] = codes
    E = np.ascontiguousarray(_dequant_codes(padded, qt) - W)
    G = np.ascontiguousarray(X.T @ X)
    active = np.ones(d_out, dtype=np.bool_)
    run = _refine_pass_numba if _accel.use_numba() else _refine_pass_numpy
    for _ in range(max_passes):
        V = np.ascontiguousarray(E @ G)
        flips = run(codes, E, V, G, step, active, q, _ACCEPT_RTOL)
        active &= flips > 0
        if not active.any():
            break

    padded[:, :d_in] = codes
    return QuantizedTensor(
        codes=pack_codes(padded, qt.bits), bits=qt.bits, group_size=qt.group_size,
        scales=qt.scales.copy(), zero_points=qt.zero_points.copy(),
        group_offsets=qt.group_offsets.copy(), shape=tuple(qt.shape),
    )


def quant_mse(W, qt: QuantizedTensor) -> float:
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        return 0.0
    return float(np.mean((dequantize(qt) - W) ** 2))

