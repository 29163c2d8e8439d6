"""Math-invariant pre-quantization transforms.

Row-vector convention throughout: a linear computes ``x @ W.T``. With
``Q = H/sqrt(d_pad)`` and ``D = diag(s)`` the spectral fold stores
``W_pad @ Q @ D`` and feeds it ``x_pad @ Q @ D^-1``; the product is unchanged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from bbtquant.calib import (
    channel_energy,
    channel_scales,
    head_eigenbasis,
    per_head_covariance,
    pooled_pair_covariance,
    so2_eigenbasis,
    spectral_energy,
)
from bbtquant.layers import LinearLayer, MatrixGammaNorm
from bbtquant.synth import SynthBlock
from bbtquant.wht import fwht_normalized, next_pow2, pad_columns

log = logging.getLogger(__name__)

MODES = ("spectral", "no_rotation", "spectral_pca", "spectral_pca_2d")
BUGGY_ATTN_ALLOWLIST = ("q_proj", "k_proj", "v_proj")
ATTN_ALLOWLIST = ("q_proj", "k_proj", "v_proj", "g_proj")
MOE_INPUT_CONSUMERS = (
    "mlp.router",
    "mlp.experts.gate_proj",
    "mlp.experts.up_proj",
    "mlp.shared.gate_proj",
    "mlp.shared.up_proj",
)
DENSE_INPUT_CONSUMERS = ("mlp.gate_proj", "mlp.up_proj")
ORTHO_TOL = 1e-10


class UnsupportedModeError(ValueError):
    pass


@dataclass
class TransformRecord:
    """Everything needed to reproduce the input hook or undo a transform."""

    mode: str
    d_in: int
    d_pad: int
    scales: np.ndarray
    per_head_U: dict[str, np.ndarray] | None = None
    per_pair_U: dict[tuple[int, int], np.ndarray] | None = None
    absorbed_consumers: list[str] = field(default_factory=list)
    skipped_consumers: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        self.scales = np.asarray(self.scales, dtype=np.float64)
        for U in (self.per_head_U or {}).values():
            for Uh in np.asarray(U).reshape(-1, U.shape[-2], U.shape[-1]):
                _check_orthogonal(Uh)
        for U in (self.per_pair_U or {}).values():
            _check_orthogonal(U)

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "d_in": self.d_in,
            "d_pad": self.d_pad,
            "scales": self.scales.tolist(),
            "absorbed_consumers": list(self.absorbed_consumers),
            "skipped_consumers": list(self.skipped_consumers),
        }
        if self.per_head_U is not None:
            out["per_head_U"] = {k: np.asarray(v).tolist() for k, v in self.per_head_U.items()}
        if self.per_pair_U is not None:
            out["per_pair_U"] = {f"{g},{p}": U.tolist() for (g, p), U in sorted(self.per_pair_U.items())}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> TransformRecord:
        per_head = d.get("per_head_U")
        per_pair = d.get("per_pair_U")
        return cls(
            mode=d["mode"],
            d_in=int(d["d_in"]),
            d_pad=int(d["d_pad"]),
            scales=np.asarray(d["scales"], dtype=np.float64),
            per_head_U=None if per_head is None else {k: np.asarray(v) for k, v in per_head.items()},
            per_pair_U=None if per_pair is None else {
                tuple(int(t) for t in k.split(",")): np.asarray(v) for k, v in per_pair.items()
            },
            absorbed_consumers=list(d.get("absorbed_consumers", [])),
            skipped_consumers=list(d.get("skipped_consumers", [])),
        )


@dataclass
class BlockTransform:
    """Per-block bundle: one record per hooked layer or per absorbed norm."""

    mode: str
    alpha: float
    records: dict[str, TransformRecord] = field(default_factory=dict)
    allowlist: tuple[str, ...] = ATTN_ALLOWLIST
    symmetric_gamma: bool = False

    def hooks(self) -> dict[str, TransformRecord]:
        if self.mode != "spectral":
            return {}
        return dict(self.records)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "alpha": self.alpha,
            "allowlist": list(self.allowlist),
            "symmetric_gamma": self.symmetric_gamma,
            "records": {k: self.records[k].to_dict() for k in sorted(self.records)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> BlockTransform:
        return cls(
            mode=d["mode"],
            alpha=float(d["alpha"]),
            records={k: TransformRecord.from_dict(v) for k, v in d["records"].items()},
            allowlist=tuple(d.get("allowlist", ATTN_ALLOWLIST)),
            symmetric_gamma=bool(d.get("symmetric_gamma", False)),
        )


def _check_orthogonal(U) -> None:
    U = np.asarray(U, dtype=np.float64)
    err = np.max(np.abs(U.T @ U - np.eye(U.shape[0])))
    if err > ORTHO_TOL:
        raise ValueError(f"rotation is not orthogonal (max |U^T U - I| = {err:.3g})")


# --------------------------------------------------------------------------
# spectral fold
# --------------------------------------------------------------------------

def fold_weight(W, s) -> np.ndarray:
    """``W_pad @ Q @ diag(s)`` for any array whose last axis is the input dim."""
    W = np.asarray(W, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    d_pad = next_pow2(W.shape[-1])
    if s.shape != (d_pad,):
        raise ValueError(f"scales must have length {d_pad}, got {s.shape}")
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise ValueError("spectral scales must be positive and finite")
    return fwht_normalized(pad_columns(W, d_pad)) * s


def unfold_weight(W_t, s, d_in: int) -> np.ndarray:
    """Inverse of :func:`fold_weight`: ``W_t @ diag(1/s) @ Q^T`` cut back to ``d_in``."""
    W_t = np.asarray(W_t, dtype=np.float64)
    return fwht_normalized(W_t / np.asarray(s, dtype=np.float64))[..., :d_in]


def fold_spectral(layer: LinearLayer, s) -> tuple[LinearLayer, TransformRecord]:
    d_in = layer.in_features
    W_t = fold_weight(layer.weight, s)
    rec = TransformRecord("spectral", d_in, W_t.shape[1], np.asarray(s, dtype=np.float64).copy())
    bias = None if layer.bias is None else layer.bias.copy()
    return LinearLayer(W_t, bias, layer.name), rec


def unfold_spectral(layer: LinearLayer, rec: TransformRecord) -> LinearLayer:
    if rec.mode != "spectral":
        raise ValueError(f"cannot unfold a {rec.mode!r} record")
    bias = None if layer.bias is None else layer.bias.copy()
    return LinearLayer(unfold_weight(layer.weight, rec.scales, rec.d_in), bias, layer.name)


def apply_input_hook(x, rec: TransformRecord) -> np.ndarray:
    """``fwht(pad(x)) / s`` along the last axis."""
    if rec.mode != "spectral":
        raise ValueError(f"input hook requires a spectral record, got {rec.mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != rec.d_in:
        raise ValueError(f"input width {x.shape[-1]} != record d_in {rec.d_in}")
    return fwht_normalized(pad_columns(x, rec.d_pad)) / rec.scales


# --------------------------------------------------------------------------
# input-side absorption
# --------------------------------------------------------------------------

def _in_dim(block: SynthBlock, name: str) -> int:
    if name in block.linears:
        return block.linears[name].in_features
    return block.experts[name].shape[-1]


def _allowlisted(block: SynthBlock, allowlist) -> tuple[list[str], list[str]]:
    attn = [f"attn.{leaf}" for leaf in allowlist if f"attn.{leaf}" in block.linears]
    if block.spec.is_moe:
        mlp = [n for n in MOE_INPUT_CONSUMERS if n in block.linears or n in block.experts]
    else:
        mlp = [n for n in DENSE_INPUT_CONSUMERS if n in block.linears]
    return attn, mlp


def input_side_consumers(block: SynthBlock, allowlist=ATTN_ALLOWLIST, part: str | None = None) -> list[str]:
    """Layers reading a normalized hidden state, filtered to ``in_features == d``.

    ``part`` selects ``"attn"`` or ``"mlp"``; default returns both.
    """
    attn, mlp = _allowlisted(block, allowlist)
    d = block.spec.d
    names = {"attn": attn, "mlp": mlp, None: attn + mlp}[part]
    return [n for n in names if _in_dim(block, n) == d]


def _scale_columns(block: SynthBlock, name: str, s: np.ndarray) -> None:
    if name in block.linears:
        block.linears[name].weight = block.linears[name].weight * s
    else:
        block.experts[name] = block.experts[name] * s


def absorb_no_rotation(block: SynthBlock, scales, mlp_scales=None, allowlist=ATTN_ALLOWLIST,
                       alpha: float = float("nan")) -> tuple[SynthBlock, BlockTransform]:
    """Divide norm gains by ``s`` and multiply every consumer's input columns by ``s``.

    ``scales`` goes to the attention input norm; ``mlp_scales`` (default: same
    vector) to the MLP input norm. Allowlisted consumers with the wrong input
    width are skipped and listed in the record.
    """
    out = block.copy()
    bt = BlockTransform("no_rotation", alpha, allowlist=tuple(allowlist))
    d = block.spec.d
    s_mlp = scales if mlp_scales is None else mlp_scales
    attn, mlp = _allowlisted(block, allowlist)
    for norm, s, names in (("input_norm", scales, attn), ("post_attn_norm", s_mlp, mlp)):
        s = np.asarray(s, dtype=np.float64)
        if s.shape != (d,):
            raise ValueError(f"{norm}: scales must have length {d}, got {s.shape}")
        if np.any(s <= 0):
            raise ValueError(f"{norm}: scales must be positive")
        absorbed, skipped = [], []
        for name in names:
            if _in_dim(block, name) != d:
                log.warning("absorption: skipping %s (in_features %d != %d)", name, _in_dim(block, name), d)
                skipped.append(name)
                continue
            _scale_columns(out, name, s)
            absorbed.append(name)
        out.norms[norm] = out.norms[norm] / s
        bt.records[norm] = TransformRecord("no_rotation", d, d, s.copy(), absorbed_consumers=absorbed,
                                           skipped_consumers=skipped)
    return out, bt


def invert_no_rotation(block: SynthBlock, bt: BlockTransform) -> SynthBlock:
    out = block.copy()
    for norm in ("input_norm", "post_attn_norm"):
        rec = bt.records.get(norm)
        if rec is None:
            continue
        for name in rec.absorbed_consumers:
            _scale_columns(out, name, 1.0 / rec.scales)
        out.norms[norm] = out.norms[norm] * rec.scales
    return out


# --------------------------------------------------------------------------
# Route A: per-head PCA with a matrix-gamma norm
# --------------------------------------------------------------------------

_HEAD_PROJ = {"attn.q_norm": "attn.q_proj", "attn.k_norm": "attn.k_proj"}


def _rotate_head_rows(W: np.ndarray, U: np.ndarray, transpose: bool) -> np.ndarray:
    """Apply ``U_h^T`` (or ``U_h``) to each head's d_h-row block of ``W``."""
    n_heads, d_h, _ = U.shape
    blocks = W.reshape(n_heads, d_h, -1)
    op = np.swapaxes(U, 1, 2) if transpose else U
    return np.einsum("hij,hjk->hik", op, blocks).reshape(W.shape)


def spectral_pca_route_a(block: SynthBlock, head_cov: dict[str, np.ndarray], *,
                         symmetric: bool = False, tie_query_heads: bool = False,
                         rotations: dict[str, np.ndarray] | None = None) -> tuple[SynthBlock, TransformRecord]:
    """Rotate q/k head rows into their covariance eigenbases and swap in matrix-gamma norms.

    ``head_cov`` maps ``"attn.q_norm"``/``"attn.k_norm"`` to H x d_h x d_h
    covariances of the pre-norm projections. ``rotations`` bypasses the
    eigendecomposition. ``symmetric=True`` builds the broken negative control.
    """
    if "attn.q_norm" not in block.norms or "attn.k_norm" not in block.norms:
        raise UnsupportedModeError("route A requires post-projection norm (q_norm/k_norm)")
    spec = block.spec
    if rotations is None:
        rotations = {name: np.stack([head_eigenbasis(C) for C in head_cov[name]]) for name in _HEAD_PROJ}
    rotations = {k: np.asarray(v, dtype=np.float64) for k, v in rotations.items()}
    if tie_query_heads:
        group = spec.n_heads // spec.n_kv_heads
        rotations["attn.q_norm"] = np.repeat(rotations["attn.k_norm"], group, axis=0)

    out = block.copy()
    for norm, proj in _HEAD_PROJ.items():
        U = rotations[norm]
        lin = out.linears[proj]
        lin.weight = _rotate_head_rows(lin.weight, U, transpose=True)
        if lin.bias is not None:
            lin.bias = _rotate_head_rows(lin.bias[:, None], U, transpose=True)[:, 0]
        gamma = out.norms.pop(norm)
        out.matrix_norms[norm] = MatrixGammaNorm(gamma, U, symmetric=symmetric)
    rec = TransformRecord("spectral_pca", spec.d, spec.d, np.ones(spec.d), per_head_U=rotations)
    return out, rec


def invert_route_a(block: SynthBlock, rec: TransformRecord) -> SynthBlock:
    out = block.copy()
    for norm, proj in _HEAD_PROJ.items():
        U = rec.per_head_U[norm]
        lin = out.linears[proj]
        lin.weight = _rotate_head_rows(lin.weight, U, transpose=False)
        if lin.bias is not None:
            lin.bias = _rotate_head_rows(lin.bias[:, None], U, transpose=False)[:, 0]
        mg = out.matrix_norms.pop(norm)
        out.norms[norm] = mg.gamma.copy()
    return out


# --------------------------------------------------------------------------
# pair-PCA: SO(2) per (kv head, RoPE pair), shared by the GQA group
# --------------------------------------------------------------------------

def _rotate_pairs(W: np.ndarray, n_heads: int, d_h: int, U_for_head, transpose: bool) -> np.ndarray:
    """Rotate row pairs ``(p, p + d_h/2)`` of every head; works for 1-D biases too."""
    W = np.array(W, dtype=np.float64, copy=True)
    flat = W.reshape(n_heads, d_h, -1)
    half = d_h // 2
    for h in range(n_heads):
        for p in range(half):
            U = U_for_head(h, p)
            op = U.T if transpose else U
            rows = flat[h, [p, p + half], :]
            flat[h, [p, p + half], :] = op @ rows
    return flat.reshape(W.shape)


def pair_pca(block: SynthBlock, pair_cov: dict[tuple[int, int], np.ndarray] | None = None, *,
             rotations: dict[tuple[int, int], np.ndarray] | None = None) -> tuple[SynthBlock, TransformRecord]:
    """Apply ``U^T`` to every q/k row pair (weights and bias).

    One rotation per (kv head, pair), shared by all query heads of the group,
    so attention scores stay invariant and the rotation commutes with RoPE.
    """
    spec = block.spec
    if spec.has_qk_norm or "attn.q_norm" in block.norms or "attn.q_norm" in block.matrix_norms:
        raise UnsupportedModeError(
            "pair-PCA requires a block without post-projection norm; use route A (spectral_pca)"
        )
    if rotations is None:
        if pair_cov is None:
            raise ValueError("pair_pca needs covariances or explicit rotations")
        rotations = {k: so2_eigenbasis(C) for k, C in sorted(pair_cov.items())}
    rotations = {k: np.asarray(U, dtype=np.float64) for k, U in rotations.items()}
    for key, U in rotations.items():
        if np.linalg.det(U) < 0:
            raise ValueError(f"pair rotation {key} is a reflection (det < 0); SO(2) required")
        _check_orthogonal(U)

    group = spec.n_heads // spec.n_kv_heads
    out = block.copy()
    _apply_pairs(out, rotations, group, transpose=True)
    rec = TransformRecord("spectral_pca_2d", spec.d, spec.d, np.ones(spec.d), per_pair_U=rotations)
    return out, rec


def _apply_pairs(block: SynthBlock, rotations, group: int, transpose: bool, bias: bool = True,
                 weights: bool = True) -> None:
    spec = block.spec
    for proj, n_heads, to_kv in (
        ("attn.q_proj", spec.n_heads, lambda h: h // group),
        ("attn.k_proj", spec.n_kv_heads, lambda h: h),
    ):
        lin = block.linears[proj]
        pick = lambda h, p, f=to_kv: rotations[(f(h), p)]  # noqa: E731
        if weights:
            lin.weight = _rotate_pairs(lin.weight, n_heads, spec.d_h, pick, transpose)
        if bias and lin.bias is not None:
            lin.bias = _rotate_pairs(lin.bias, n_heads, spec.d_h, pick, transpose)


def invert_pair_pca(block: SynthBlock, rec: TransformRecord, *, invert_bias: bool = True) -> SynthBlock:
    """Un-rotate q/k row pairs (and biases) with ``U``, restoring the plain layout.

    ``invert_bias=False`` reproduces the bias-omission failure for diagnostics.
    """
    if rec.mode != "spectral_pca_2d":
        raise ValueError(f"expected a spectral_pca_2d record, got {rec.mode!r}")
    spec = block.spec
    out = block.copy()
    _apply_pairs(out, rec.per_pair_U, spec.n_heads // spec.n_kv_heads, transpose=False, bias=invert_bias)
    return out


# --------------------------------------------------------------------------
# block-level driver
# --------------------------------------------------------------------------

def spectral_consumers(block: SynthBlock) -> list[str]:
    """Every layer the spectral mode folds: all 2-D linears plus fused expert gate/up."""
    names = sorted(block.linears)
    names += [n for n in ("mlp.experts.gate_proj", "mlp.experts.up_proj") if n in block.experts]
    return names


def check_mode_supported(block: SynthBlock, mode: str) -> None:
    if mode not in MODES:
        raise UnsupportedModeError(f"unknown mode {mode!r}; expected one of {MODES}")
    spec = block.spec
    if mode == "spectral_pca" and not spec.has_qk_norm:
        raise UnsupportedModeError(
            f"mode spectral_pca on family {spec.family!r}: route A requires post-projection norm"
        )
    if mode == "spectral_pca_2d" and spec.has_qk_norm:
        raise UnsupportedModeError(
            f"mode spectral_pca_2d on family {spec.family!r}: pair-PCA requires a block "
            "without post-projection norm"
        )


def block_statistics(block: SynthBlock, taps: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Everything :func:`prepare_block` needs, computed from :func:`collect_taps` output.

    Keys: ``rho.spectral.<layer>``, ``rho.channel.input_norm``,
    ``rho.channel.post_attn_norm``, ``cov.head.attn.q_norm``,
    ``cov.head.attn.k_norm`` and ``cov.pair`` (H_kv x d_h/2 x 2 x 2, pooled).
    """
    spec = block.spec
    stats = {}
    for name in spectral_consumers(block):
        if name not in taps:
            raise KeyError(f"no calibration activations for '{name}'")
        stats[f"rho.spectral.{name}"] = spectral_energy(taps[name])
    attn = input_side_consumers(block, ATTN_ALLOWLIST, "attn")
    mlp = input_side_consumers(block, ATTN_ALLOWLIST, "mlp")
    stats["rho.channel.input_norm"] = channel_energy(taps[attn[0]])
    stats["rho.channel.post_attn_norm"] = channel_energy(taps[mlp[0]])
    stats["cov.head.attn.q_norm"] = per_head_covariance(taps["attn.q_proj.out"])
    stats["cov.head.attn.k_norm"] = per_head_covariance(taps["attn.k_proj.out"])
    pooled = pooled_pair_covariance(taps["attn.q_proj.out"], taps["attn.k_proj.out"], spec.n_kv_heads)
    half = spec.d_h // 2
    stats["cov.pair"] = np.stack([
        np.stack([pooled[(g, p)] for p in range(half)]) for g in range(spec.n_kv_heads)
    ])
    return stats


def _need(stats, key):
    if key not in stats:
        raise KeyError(f"missing calibration statistic '{key}'")
    return stats[key]


def prepare_block(block: SynthBlock, mode: str, stats: dict[str, np.ndarray], alpha: float = 0.5, *,
                  allowlist=ATTN_ALLOWLIST, symmetric_gamma: bool = False,
                  tie_query_heads: bool = False) -> tuple[SynthBlock, BlockTransform]:
    """Transform ``block`` from calibration ``stats`` (see :func:`block_statistics`).

    The PCA modes sit on top of norm-absorbed channel scaling; with
    ``alpha=0`` that layer is the identity.
    """
    check_mode_supported(block, mode)
    if mode == "spectral":
        out = block.copy()
        bt = BlockTransform("spectral", alpha, allowlist=tuple(allowlist))
        for name in spectral_consumers(block):
            rho = _need(stats, f"rho.spectral.{name}")
            s = channel_scales(rho, alpha, rho.shape[0])
            if name in out.linears:
                out.linears[name], rec = fold_spectral(out.linears[name], s)
            else:
                W = out.experts[name]
                out.experts[name] = fold_weight(W, s)
                rec = TransformRecord("spectral", W.shape[-1], s.shape[0], s)
            bt.records[name] = rec
        return out, bt

    s_attn = channel_scales(_need(stats, "rho.channel.input_norm"), alpha)
    s_mlp = channel_scales(_need(stats, "rho.channel.post_attn_norm"), alpha)
    out, bt = absorb_no_rotation(block, s_attn, s_mlp, allowlist=allowlist, alpha=alpha)
    bt.mode = mode
    if mode == "spectral_pca":
        cov = {k: _need(stats, f"cov.head.{k}") for k in _HEAD_PROJ}
        out, rec = spectral_pca_route_a(out, cov, symmetric=symmetric_gamma, tie_query_heads=tie_query_heads)
        bt.records["attn"] = rec
        bt.symmetric_gamma = symmetric_gamma
    elif mode == "spectral_pca_2d":
        pairs = _need(stats, "cov.pair")
        cov = {(g, p): pairs[g, p] for g in range(pairs.shape[0]) for p in range(pairs.shape[1])}
        out, rec = pair_pca(out, cov)
        bt.records["attn"] = rec
    return out, bt


def calibrate_and_prepare(block: SynthBlock, mode: str, x, positions=None, alpha: float = 0.5, **kw):
    """Convenience: taps -> statistics -> transform, all on ``block`` itself."""
    from bbtquant.synth import collect_taps

    stats = block_statistics(block, collect_taps(block, x, positions))
    return prepare_block(block, mode, stats, alpha, **kw)


def invert_block(block: SynthBlock, bt: BlockTransform) -> SynthBlock:
    """Undo every step of ``bt``; the result has the vanilla architecture."""
    if bt.mode == "spectral":
        out = block.copy()
        for name, rec in bt.records.items():
            if name in out.linears:
                out.linears[name] = unfold_spectral(out.linears[name], rec)
            else:
                out.experts[name] = unfold_weight(out.experts[name], rec.scales, rec.d_in)
        return out
    out = block
    attn = bt.records.get("attn")
    if attn is not None and attn.mode == "spectral_pca":
        out = invert_route_a(out, attn)
    elif attn is not None and attn.mode == "spectral_pca_2d":
        out = invert_pair_pca(out, attn)
    return invert_no_rotation(out, bt)
