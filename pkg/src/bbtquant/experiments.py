"""Quantization payoff of spectral scaling on the anisotropic fixture."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from bbtquant.calib import channel_scales, spectral_energy
from bbtquant.quant import dequantize, quantize_groupwise, signround_refine
from bbtquant.synth import anisotropic_fixture
from bbtquant.transform import fold_weight
from bbtquant.wht import fwht_normalized, pad_columns

ALPHA_GRID = (0.0, 0.25, 0.5, 1.0)
BITS_GRID = (2, 4)


@dataclass(frozen=True)
class FixtureConfig:
    d_in: int = 256
    d_out: int = 128
    n_samples: int = 1024
    exponent: float = 1.5
    group_size: int = 64
    refine_passes: int = 0


@dataclass
class PayoffResult:
    seed: int
    bits: int
    alpha: float
    vanilla_mse: float
    bbt_mse: float

    @property
    def rel_improvement(self) -> float:
        return (self.vanilla_mse - self.bbt_mse) / self.vanilla_mse


def _quantize(W, bits, cfg: FixtureConfig, calib):
    qt = quantize_groupwise(W, bits, cfg.group_size)
    if cfg.refine_passes:
        qt = signround_refine(qt, W, calib, cfg.refine_passes)
    return dequantize(qt)


def payoff(seed: int, bits: int, alpha: float, cfg: FixtureConfig = FixtureConfig()) -> PayoffResult:
    """Held-out output MSE of plain RTN vs spectral fold + RTN for one fixture draw."""
    fx = anisotropic_fixture(seed, cfg.d_in, cfg.d_out, cfg.n_samples, cfg.exponent)
    X, W = fx.evaluation, fx.weight
    y_ref = X @ W.T

    W_hat = _quantize(W, bits, cfg, fx.calib)
    vanilla = float(np.mean((X @ W_hat.T - y_ref) ** 2))

    s = channel_scales(spectral_energy(fx.calib), alpha)
    W_t = fold_weight(W, s)
    calib_t = fwht_normalized(pad_columns(fx.calib, s.shape[0])) / s
    W_t_hat = _quantize(W_t, bits, cfg, calib_t)
    X_t = fwht_normalized(pad_columns(X, s.shape[0])) / s
    bbt = float(np.mean((X_t @ W_t_hat.T - y_ref) ** 2))
    return PayoffResult(seed, bits, float(alpha), vanilla, bbt)


def sweep(axis: str, values, seeds, *, bits: int = 2, alpha: float = 0.5,
          cfg: FixtureConfig = FixtureConfig()) -> list[dict]:
    """One row per swept value with medians over ``seeds``; the other knob stays frozen."""
    if axis not in ("alpha", "bits"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    rows = []
    for v in values:
        kw = {"bits": int(v), "alpha": alpha} if axis == "bits" else {"bits": bits, "alpha": float(v)}
        res = [payoff(int(s), kw["bits"], kw["alpha"], cfg) for s in seeds]
        rows.append({
            "value": kw[axis],
            "bits": kw["bits"],
            "alpha": kw["alpha"],
            "n_seeds": len(res),
            "median_vanilla_mse": float(np.median([r.vanilla_mse for r in res])),
            "median_bbt_mse": float(np.median([r.bbt_mse for r in res])),
            "median_rel_improvement": float(np.median([r.rel_improvement for r in res])),
        })
    return rows


def fixture_config_dict(cfg: FixtureConfig) -> dict:
    return asdict(cfg)
