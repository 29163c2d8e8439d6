"""Synthetic decoder blocks and a reference forward interpreter.

One block is pre-norm attention (RoPE, GQA, causal softmax, optional per-head
q/k RMSNorm and softplus head gate) followed by a pre-norm MLP (dense SwiGLU
or a top-k routed mixture of fused experts with an optional shared expert).
Everything runs in float64.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from bbtquant.layers import (
    LinearLayer,
    MatrixGammaNorm,
    rms_norm,
    silu,
    softplus,
)

FAMILIES = ("llama", "qwen2_bias", "qwen3_qnorm", "laguna_gate", "moe_fused")

ATTN_LINEARS = ("attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.g_proj", "attn.o_proj")
DENSE_MLP_LINEARS = ("mlp.gate_proj", "mlp.up_proj", "mlp.down_proj")
MOE_LINEARS = ("mlp.router", "mlp.shared.gate_proj", "mlp.shared.up_proj", "mlp.shared.down_proj")
EXPERT_TENSORS = ("mlp.experts.gate_proj", "mlp.experts.up_proj", "mlp.experts.down_proj")

BIAS_STD = 0.5
GAMMA_STD = 0.2
# head-gate logits stay in softplus's near-linear range, as with a 0.02 initializer
GATE_STD = 0.02


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Child generator for ``(seed, *keys)``.

    Splitting rule: string keys become their CRC32, integers pass through, and
    the tuple is used as the ``spawn_key`` of ``SeedSequence(seed)``.
    """
    spawn = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn))


@dataclass(frozen=True)
class BlockSpec:
    family: str = "llama"
    d: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    d_ff: int = 128
    n_experts: int = 4
    top_k: int = 2
    has_shared_expert: bool = True
    seed: int = 0
    rope_base: float = 10000.0

    @property
    def d_h(self) -> int:
        return self.d // self.n_heads

    @property
    def has_bias(self) -> bool:
        return self.family == "qwen2_bias"

    @property
    def has_qk_norm(self) -> bool:
        return self.family in ("qwen3_qnorm", "laguna_gate")

    @property
    def has_gate(self) -> bool:
        return self.family == "laguna_gate"

    @property
    def is_moe(self) -> bool:
        return self.family == "moe_fused"

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.d < 1 or self.n_heads < 1 or self.n_kv_heads < 1 or self.d_ff < 1:
            raise ValueError("dimensions must be positive")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.n_heads % self.n_kv_heads:
            raise ValueError(f"n_heads={self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        if self.d_h % 2:
            raise ValueError(f"head dim {self.d_h} must be even for RoPE pairs")
        if self.is_moe and not (1 <= self.top_k <= self.n_experts):
            raise ValueError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> BlockSpec:
        return cls(**d)


@dataclass
class SynthBlock:
    spec: BlockSpec
    linears: dict[str, LinearLayer]
    norms: dict[str, np.ndarray]
    experts: dict[str, np.ndarray] = field(default_factory=dict)
    matrix_norms: dict[str, MatrixGammaNorm] = field(default_factory=dict)

    def copy(self) -> SynthBlock:
        return SynthBlock(
            spec=self.spec,
            linears={k: v.copy() for k, v in self.linears.items()},
            norms={k: v.copy() for k, v in self.norms.items()},
            experts={k: v.copy() for k, v in self.experts.items()},
            matrix_norms={k: v.copy() for k, v in self.matrix_norms.items()},
        )

    def astype_roundtrip(self, dtype) -> SynthBlock:
        """Copy with every parameter stored in ``dtype`` and read back as float64."""
        cast = lambda a: np.asarray(a).astype(dtype).astype(np.float64)  # noqa: E731
        out = self.copy()
        for lin in out.linears.values():
            lin.weight = cast(lin.weight)
            if lin.bias is not None:
                lin.bias = cast(lin.bias)
        out.norms = {k: cast(v) for k, v in out.norms.items()}
        out.experts = {k: cast(v) for k, v in out.experts.items()}
        out.matrix_norms = {
            k: MatrixGammaNorm(cast(m.gamma), cast(m.U), m.eps, m.symmetric)
            for k, m in out.matrix_norms.items()
        }
        return out


def _gauss(spec: BlockSpec, name: str, shape, std: float) -> np.ndarray:
    return derive_rng(spec.seed, "param", name).standard_normal(shape) * std


def build_block(spec: BlockSpec) -> SynthBlock:
    """Seeded Gaussian weights scaled by 1/sqrt(fan_in); each tensor has its own stream."""
    spec.validate()
    d, H, Hkv, d_h, d_ff = spec.d, spec.n_heads, spec.n_kv_heads, spec.d_h, spec.d_ff

    def lin(name, d_out, d_in, bias=False, std=None):
        w = _gauss(spec, name + ".weight", (d_out, d_in), std or 1.0 / np.sqrt(d_in))
        b = _gauss(spec, name + ".bias", (d_out,), BIAS_STD) if bias else None
        return LinearLayer(w, b, name)

    def gamma(name, n):
        return 1.0 + _gauss(spec, name, (n,), GAMMA_STD)

    linears = {
        "attn.q_proj": lin("attn.q_proj", H * d_h, d, spec.has_bias),
        "attn.k_proj": lin("attn.k_proj", Hkv * d_h, d, spec.has_bias),
        "attn.v_proj": lin("attn.v_proj", Hkv * d_h, d, spec.has_bias),
        "attn.o_proj": lin("attn.o_proj", d, H * d_h),
    }
    norms = {"input_norm": gamma("input_norm", d), "post_attn_norm": gamma("post_attn_norm", d)}
    if spec.has_gate:
        linears["attn.g_proj"] = lin("attn.g_proj", H, d, std=GATE_STD)
    if spec.has_qk_norm:
        norms["attn.q_norm"] = gamma("attn.q_norm", d_h)
        norms["attn.k_norm"] = gamma("attn.k_norm", d_h)

    experts = {}
    if spec.is_moe:
        E = spec.n_experts
        linears["mlp.router"] = lin("mlp.router", E, d)
        experts["mlp.experts.gate_proj"] = _gauss(spec, "mlp.experts.gate_proj", (E, d_ff, d), d**-0.5)
        experts["mlp.experts.up_proj"] = _gauss(spec, "mlp.experts.up_proj", (E, d_ff, d), d**-0.5)
        experts["mlp.experts.down_proj"] = _gauss(spec, "mlp.experts.down_proj", (E, d, d_ff), d_ff**-0.5)
        if spec.has_shared_expert:
            linears["mlp.shared.gate_proj"] = lin("mlp.shared.gate_proj", d_ff, d)
            linears["mlp.shared.up_proj"] = lin("mlp.shared.up_proj", d_ff, d)
            linears["mlp.shared.down_proj"] = lin("mlp.shared.down_proj", d, d_ff)
    else:
        linears["mlp.gate_proj"] = lin("mlp.gate_proj", d_ff, d)
        linears["mlp.up_proj"] = lin("mlp.up_proj", d_ff, d)
        linears["mlp.down_proj"] = lin("mlp.down_proj", d, d_ff)
    return SynthBlock(spec=spec, linears=linears, norms=norms, experts=experts)


def zero_block(spec: BlockSpec) -> SynthBlock:
    block = build_block(spec)
    for lin in block.linears.values():
        lin.weight[:] = 0.0
        if lin.bias is not None:
            lin.bias[:] = 0.0
    for arr in block.experts.values():
        arr[:] = 0.0
    return block


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------

def rope_angles(positions, d_h: int, base: float) -> np.ndarray:
    """T x d_h/2 angles ``pos * base**(-2i/d_h)``."""
    inv_freq = base ** (-2.0 * np.arange(d_h // 2) / d_h)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def apply_rope(x: np.ndarray, positions, base: float) -> np.ndarray:
    """Rotate planes ``(i, i + d_h/2)`` of a T x H x d_h array."""
    d_h = x.shape[-1]
    half = d_h // 2
    ang = rope_angles(positions, d_h, base)[:, None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    a, b = x[..., :half], x[..., half:]
    return np.concatenate([a * cos - b * sin, a * sin + b * cos], axis=-1)


def _hooked(x, name, hooks, taps):
    if hooks and name in hooks:
        from bbtquant.transform import apply_input_hook

        x = apply_input_hook(x, hooks[name])
    if taps is not None:
        taps.setdefault(name, []).append(x)
    return x


def _linear(block, name, x, hooks, taps):
    return block.linears[name](_hooked(x, name, hooks, taps))


def _head_norm(block, name, y):
    if name in block.matrix_norms:
        return block.matrix_norms[name](y)
    if name in block.norms:
        return rms_norm(y, block.norms[name])
    return y


def _attention(block, h, positions, hooks, taps):
    spec = block.spec
    T = h.shape[0]
    H, Hkv, d_h = spec.n_heads, spec.n_kv_heads, spec.d_h
    q = _linear(block, "attn.q_proj", h, hooks, taps).reshape(T, H, d_h)
    k = _linear(block, "attn.k_proj", h, hooks, taps).reshape(T, Hkv, d_h)
    v = _linear(block, "attn.v_proj", h, hooks, taps).reshape(T, Hkv, d_h)
    if taps is not None:
        taps.setdefault("attn.q_proj.out", []).append(q)
        taps.setdefault("attn.k_proj.out", []).append(k)
    q = apply_rope(_head_norm(block, "attn.q_norm", q), positions, spec.rope_base)
    k = apply_rope(_head_norm(block, "attn.k_norm", k), positions, spec.rope_base)

    group = H // Hkv
    k = np.repeat(k, group, axis=1)
    v = np.repeat(v, group, axis=1)
    scores = np.einsum("thd,shd->hts", q, k) / np.sqrt(d_h)
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(causal[None], -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.einsum("hts,shd->thd", p, v)

    if "attn.g_proj" in block.linears:
        gate = softplus(_linear(block, "attn.g_proj", h, hooks, taps))
        out = out * gate[:, :, None]
    return _linear(block, "attn.o_proj", out.reshape(T, H * d_h), hooks, taps)


def _swiglu(block, prefix, h, hooks, taps):
    g = _linear(block, prefix + ".gate_proj", h, hooks, taps)
    u = _linear(block, prefix + ".up_proj", h, hooks, taps)
    return _linear(block, prefix + ".down_proj", silu(g) * u, hooks, taps)


def _moe(block, h, hooks, taps):
    spec = block.spec
    logits = _linear(block, "mlp.router", h, hooks, taps)
    probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    top = np.argsort(-probs, axis=-1, kind="stable")[:, : spec.top_k]

    hg = _hooked(h, "mlp.experts.gate_proj", hooks, taps)
    hu = _hooked(h, "mlp.experts.up_proj", hooks, taps)
    gate = np.einsum("efd,td->tef", block.experts["mlp.experts.gate_proj"], hg)
    up = np.einsum("efd,td->tef", block.experts["mlp.experts.up_proj"], hu)
    act = silu(gate) * up
    expert_out = np.einsum("edf,tef->ted", block.experts["mlp.experts.down_proj"], act)

    T = h.shape[0]
    weights = np.zeros((T, spec.n_experts))
    rows = np.arange(T)[:, None]
    weights[rows, top] = probs[rows, top]
    out = np.einsum("te,ted->td", weights, expert_out)
    if "mlp.shared.gate_proj" in block.linears:
        out = out + _swiglu(block, "mlp.shared", h, hooks, taps)
    return out


def forward(block: SynthBlock, x, positions=None, hooks=None, taps=None) -> np.ndarray:
    """Run the block on a T x d input (or a B x T x d batch).

    ``hooks`` maps layer names to spectral records whose input hook is applied
    right before that layer; ``taps`` (a dict) collects every layer's actual
    input plus the pre-norm q/k projections.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return np.stack([forward(block, xi, positions, hooks, taps) for xi in x])
    T = x.shape[0]
    if positions is None:
        positions = np.arange(T)
    positions = np.asarray(positions)
    if positions.shape != (T,):
        raise ValueError(f"positions shape {positions.shape} does not match T={T}")
    if np.any(positions < 0):
        raise ValueError("positions must be nonnegative")

    h = rms_norm(x, block.norms["input_norm"])
    x = x + _attention(block, h, positions, hooks, taps)
    h2 = rms_norm(x, block.norms["post_attn_norm"])
    if block.spec.is_moe:
        mlp = _moe(block, h2, hooks, taps)
    else:
        mlp = _swiglu(block, "mlp", h2, hooks, taps)
    return x + mlp


def collect_taps(block: SynthBlock, x, positions=None, hooks=None) -> dict[str, np.ndarray]:
    """Concatenated per-layer inputs (N x d_in) and q/k head outputs (N x H x d_h)."""
    taps: dict[str, list] = {}
    forward(block, x, positions, hooks=hooks, taps=taps)
    return {k: np.concatenate(v, axis=0) for k, v in taps.items()}


def rel_err(y, y_ref) -> float:
    """``max|y - y_ref| / max|y_ref|``."""
    y = np.asarray(y, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    denom = np.max(np.abs(y_ref))
    diff = np.max(np.abs(y - y_ref))
    if denom == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / denom)


# --------------------------------------------------------------------------
# inputs and the anisotropic quantization fixture
# --------------------------------------------------------------------------

def random_inputs(spec: BlockSpec, seed: int, T: int = 8, *, batch: int | None = None,
                  outlier_sigma: float = 0.75, max_position: int = 4096):
    """Hidden states with log-normal per-channel magnitudes and distinct random positions.

    The channel profile is fixed by ``spec.seed`` so calibration and test
    inputs share it; the draws themselves come from ``seed``.
    """
    profile = np.exp(outlier_sigma * derive_rng(spec.seed, "channel_profile").standard_normal(spec.d))
    rng = derive_rng(seed, "inputs", spec.seed)
    shape = (T, spec.d) if batch is None else (batch, T, spec.d)
    x = rng.standard_normal(shape) * profile
    positions = np.sort(rng.choice(max_position, size=T, replace=False))
    return x, positions


@dataclass
class AnisotropicFixture:
    weight: np.ndarray       # d_out x d_in
    calib: np.ndarray        # N x d_in
    evaluation: np.ndarray   # N x d_in
    energy: np.ndarray       # per-spectral-coordinate input energy profile


def anisotropic_fixture(seed: int, d_in: int = 256, d_out: int = 128, n_samples: int = 1024,
                        exponent: float = 1.5) -> AnisotropicFixture:
    """Dense layer fed by correlated inputs with power-law spectral column energies.

    The energy reaching Walsh coordinate ``perm[k]`` is ``(k+1)**-exponent`` for
    a seeded permutation, so inputs are correlated across the original
    channels. The weight is i.i.d. Gaussian scaled by 1/sqrt(d_in).
    """
    from bbtquant.wht import fwht_normalized, is_pow2

    if not is_pow2(d_in):
        raise ValueError("anisotropic fixture needs a power-of-two d_in")
    rng = derive_rng(seed, "anisotropic")
    W = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
    perm = rng.permutation(d_in)
    energy = np.empty(d_in)
    energy[perm] = (np.arange(d_in) + 1.0) ** (-exponent)
    amp = np.sqrt(energy)

    def draw(tag):
        z = derive_rng(seed, "anisotropic", tag).standard_normal((n_samples, d_in)) * amp
        return fwht_normalized(z)  # H is symmetric and orthonormal after scaling

    return AnisotropicFixture(W, draw("calib"), draw("eval"), energy)

