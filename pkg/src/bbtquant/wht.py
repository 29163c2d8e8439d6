"""Normalized fast Walsh-Hadamard transform and padding helpers.

The butterfly is iterative and in place with stride-doubling order, so the
sequence of floating-point operations per row is fixed and outputs are
bit-stable across runs and across the numba/numpy backends.
"""
from __future__ import annotations

import math

import numpy as np

from bbtquant import _accel


def next_pow2(d: int) -> int:
    """Smallest power of two >= ``d``."""
    d = int(d)
    if d < 1:
        raise ValueError(f"next_pow2 requires d >= 1, got {d}")
    return 1 << (d - 1).bit_length()


def is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@_accel.njit(cache=True)
def _fwht_rows_numba(x):
    n_rows, d = x.shape
    norm = math.sqrt(d)
    for r in range(n_rows):
        h = 1
        while h < d:
            for i in range(0, d, 2 * h):
                for j in range(i, i + h):
                    a = x[r, j]
                    b = x[r, j + h]
                    x[r, j] = a + b
                    x[r, j + h] = a - b
            h *= 2
        for j in range(d):
            x[r, j] = x[r, j] / norm


def _fwht_rows_numpy(x):
    n_rows, d = x.shape
    h = 1
    while h < d:
        y = x.reshape(n_rows, d // (2 * h), 2, h)
        a = y[:, :, 0, :].copy()
        b = y[:, :, 1, :]
        y[:, :, 0, :] = a + b
        y[:, :, 1, :] = a - b
        h *= 2
    x /= math.sqrt(d)


def fwht_normalized(v: np.ndarray) -> np.ndarray:
    """Return ``H v / sqrt(d)`` along the last axis.

    ``v`` may be a vector or a stack of row vectors; the last axis must have
    power-of-two length. The input is not modified.
    """
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[-1] if v.ndim else 0
    if v.ndim == 0 or not is_pow2(d):
        raise ValueError(f"fwht_normalized needs a power-of-two length, got {d}")
    out = np.array(v, dtype=np.float64, order="C", copy=True)
    rows = out.reshape(-1, d)
    if _accel.use_numba():
        _fwht_rows_numba(rows)
    else:
        _fwht_rows_numpy(rows)
    return out


def pad_columns(W: np.ndarray, d_pad: int | None = None) -> np.ndarray:
    """Embed ``W`` as ``[W 0]`` with ``d_pad`` columns (default: next power of two)."""
    W = np.asarray(W, dtype=np.float64)
    d_in = W.shape[-1]
    if d_in < 1:
        raise ValueError("pad_columns requires at least one column")
    if d_pad is None:
        d_pad = next_pow2(d_in)
    if d_pad < d_in:
        raise ValueError(f"d_pad={d_pad} is smaller than d_in={d_in}")
    if d_pad == d_in:
        return W.copy()
    out = np.zeros(W.shape[:-1] + (d_pad,), dtype=np.float64)
    out[..., :d_in] = W
    return out


def sylvester_hadamard(n: int) -> np.ndarray:
    """Dense +-1 Sylvester-Hadamard matrix, built by the block recursion.

    Only used as an oracle for the butterfly; O(n^2) memory.
    """
    if not is_pow2(n):
        raise ValueError(f"Hadamard order must be a power of two, got {n}")
    H = np.ones((1, 1))
    while H.shape[0] < n:
        H = np.block([[H, H], [H, -H]])
    return H


def hadamard_dense_transform(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    return v @ sylvester_hadamard(n).T / math.sqrt(n)
