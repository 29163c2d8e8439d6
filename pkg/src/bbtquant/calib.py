"""Calibration statistics: spectral energies, channel scales and covariances."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from bbtquant.wht import fwht_normalized, next_pow2, pad_columns

log = logging.getLogger(__name__)


class DegenerateCalibrationError(ValueError):
    pass


@dataclass
class CalibStats:
    """Calibration summary for one consumer group.

    ``rho`` sums to one; ``per_head_cov`` is H x d_h x d_h and ``per_pair_cov``
    maps ``(head, pair)`` to a 2x2 matrix.
    """

    rho: np.ndarray
    alpha: float = 0.5
    per_head_cov: np.ndarray | None = None
    per_pair_cov: dict[tuple[int, int], np.ndarray] | None = None
    warnings: list[str] = field(default_factory=list)


def _as_batch(batch) -> np.ndarray:
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise DegenerateCalibrationError("degenerate calibration: empty batch")
    if not np.all(np.isfinite(X)):
        raise ValueError("calibration batch contains non-finite values")
    return X


def _normalized_energy(h: np.ndarray) -> np.ndarray:
    energy = np.mean(h * h, axis=0)
    total = energy.sum()
    if not total > 0.0:
        raise DegenerateCalibrationError("degenerate calibration: all samples are zero")
    return energy / total


def spectral_energy(batch) -> np.ndarray:
    """Per-coordinate share of mean squared WHT energy, length ``next_pow2(d_in)``."""
    X = _as_batch(batch)
    h = fwht_normalized(pad_columns(X))
    return _normalized_energy(h)


def channel_energy(batch) -> np.ndarray:
    """Same normalisation as :func:`spectral_energy` but in the identity basis."""
    return _normalized_energy(_as_batch(batch))


def channel_scales(rho, alpha: float, d_pad: int | None = None) -> np.ndarray:
    """``s_l = (1 + d_pad * rho_l) ** alpha``."""
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho < 0):
        raise ValueError("rho has negative entries")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if d_pad is None:
        d_pad = rho.shape[0]
    if alpha == 0:
        return np.ones_like(rho)
    return (1.0 + d_pad * rho) ** alpha


def per_head_covariance(head_outputs) -> np.ndarray:
    """Uncentered second moments ``E[y_h y_h^T]`` for an N x H x d_h array."""
    Y = np.asarray(head_outputs, dtype=np.float64)
    if Y.ndim != 3:
        raise ValueError(f"head outputs must be N x H x d_h, got shape {Y.shape}")
    n, _, d_h = Y.shape
    if n < d_h:
        log.warning("per-head covariance from %d samples < head dim %d", n, d_h)
    C = np.einsum("nhi,nhj->hij", Y, Y) / n
    return 0.5 * (C + np.swapaxes(C, 1, 2))


def per_pair_covariance(head_outputs) -> dict[tuple[int, int], np.ndarray]:
    """2x2 second moments of the RoPE planes ``(p, p + d_h/2)`` of every head."""
    Y = np.asarray(head_outputs, dtype=np.float64)
    if Y.ndim != 3:
        raise ValueError(f"head outputs must be N x H x d_h, got shape {Y.shape}")
    n, n_heads, d_h = Y.shape
    if d_h % 2:
        raise ValueError(f"pair covariance needs an even head dim, got {d_h}")
    half = d_h // 2
    out = {}
    for h in range(n_heads):
        for p in range(half):
            pair = Y[:, h, [p, p + half]]
            C = pair.T @ pair / n
            out[(h, p)] = 0.5 * (C + C.T)
    return out


def pooled_pair_covariance(q_out, k_out, n_kv_heads: int) -> dict[tuple[int, int], np.ndarray]:
    """Per (kv head, pair) covariance pooling the k head with all its query heads.

    ``q_out`` is N x H x d_h and ``k_out`` is N x H_kv x d_h. Samples from every
    head in the group are stacked before taking the second moment.
    """
    Q = np.asarray(q_out, dtype=np.float64)
    K = np.asarray(k_out, dtype=np.float64)
    n_heads = Q.shape[1]
    if n_heads % n_kv_heads:
        raise ValueError("n_heads must be divisible by n_kv_heads")
    group = n_heads // n_kv_heads
    out = {}
    for g in range(n_kv_heads):
        stacked = np.concatenate([K[:, g]] + [Q[:, g * group + j] for j in range(group)], axis=0)
        pairs = per_pair_covariance(stacked[:, None, :])
        for (_, p), C in pairs.items():
            out[(g, p)] = C
    return out


def so2_eigenbasis(C) -> np.ndarray:
    """Proper rotation whose columns are the eigenvectors of a symmetric 2x2 ``C``.

    Closed form: the principal axis sits at ``0.5 * atan2(2b, a - c)``, so the
    first column carries the larger eigenvalue and det is +1 by construction.
    Exactly isotropic ``C`` maps to the identity.
    """
    C = np.asarray(C, dtype=np.float64)
    a = float(C[0, 0])
    c = float(C[1, 1])
    b = 0.5 * (float(C[0, 1]) + float(C[1, 0])) + 0.0
    if b == 0.0 and a >= c:
        return np.eye(2)
    phi = 0.5 * math.atan2(2.0 * b, a - c)
    co, si = math.cos(phi), math.sin(phi)
    return np.array([[co, -si], [si, co]])


def head_eigenbasis(C) -> np.ndarray:
    """Orthogonal eigenbasis of a symmetric d_h x d_h matrix, descending eigenvalues."""
    C = np.asarray(C, dtype=np.float64)
    _, U = np.linalg.eigh(0.5 * (C + C.T))
    U = U[:, ::-1].copy()
    # pin each column's sign so the largest-magnitude entry is positive
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs
