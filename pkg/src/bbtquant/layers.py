"""Small layer primitives shared by the transforms and the synthetic model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RMS_EPS = 1e-6


@dataclass
class LinearLayer:
    """``y = x @ weight.T + bias`` (row-vector convention)."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError(f"{self.name or 'linear'}: weight must be 2-D, got {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weight.shape[0],):
                raise ValueError(
                    f"{self.name or 'linear'}: bias length {self.bias.shape} "
                    f"does not match d_out={self.weight.shape[0]}"
                )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.weight.T
        if self.bias is not None:
            y = y + self.bias
        return y

    def copy(self) -> LinearLayer:
        return LinearLayer(
            self.weight.copy(), None if self.bias is None else self.bias.copy(), self.name
        )


def rms(x: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    return np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def rms_norm(x: np.ndarray, gamma: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    return x / rms(x, eps) * gamma


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


@dataclass
class MatrixGammaNorm:
    """Per-head RMSNorm whose gain is the matrix ``diag(gamma) @ U_h``.

    For ``z = U_h^T y`` the output equals ``gamma * y / RMS(y)``, because RMS is
    rotation invariant. ``symmetric=True`` switches the gain to
    ``U_h^T diag(gamma) U_h``; that variant is wrong under RoPE and exists only
    as a negative control.
    """

    gamma: np.ndarray
    U: np.ndarray  # H x d_h x d_h
    eps: float = RMS_EPS
    symmetric: bool = False
    matrices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.U = np.asarray(self.U, dtype=np.float64)
        if self.symmetric:
            self.matrices = np.einsum("hji,j,hjk->hik", self.U, self.gamma, self.U)
        else:
            self.matrices = self.gamma[None, :, None] * self.U

    def __call__(self, z: np.ndarray) -> np.ndarray:
        """``z``: ... x H x d_h."""
        return np.einsum("hij,...hj->...hi", self.matrices, z) / rms(z, self.eps)

    def copy(self) -> MatrixGammaNorm:
        return MatrixGammaNorm(self.gamma.copy(), self.U.copy(), self.eps, self.symmetric)
