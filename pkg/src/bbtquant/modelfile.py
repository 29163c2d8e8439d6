"""SynthBlock <-> container round trips."""
from __future__ import annotations

import numpy as np

from bbtquant.containers import read_bbtq, read_bbtt, write_bbtt
from bbtquant.layers import LinearLayer, MatrixGammaNorm
from bbtquant.quant import dequantize
from bbtquant.synth import BlockSpec, SynthBlock


class MissingTensorError(KeyError):
    def __str__(self):
        return self.args[0]


def block_tensors(block: SynthBlock) -> dict[str, np.ndarray]:
    out = {}
    for name, lin in block.linears.items():
        out[f"{name}.weight"] = lin.weight
        if lin.bias is not None:
            out[f"{name}.bias"] = lin.bias
    for name, gamma in block.norms.items():
        out[f"{name}.weight"] = gamma
    for name, arr in block.experts.items():
        out[f"{name}.weight"] = arr
    for name, mg in block.matrix_norms.items():
        out[f"{name}.weight"] = mg.gamma
        out[f"{name}.rotation"] = mg.U
    return out


def block_metadata(block: SynthBlock, **extra) -> dict:
    meta = {
        "block_spec": block.spec.to_dict(),
        "linears": sorted(block.linears),
        "norms": sorted(block.norms),
        "experts": sorted(block.experts),
        "matrix_norms": {k: {"eps": m.eps, "symmetric": m.symmetric} for k, m in sorted(block.matrix_norms.items())},
    }
    meta.update(extra)
    return meta


def block_from_tensors(tensors: dict[str, np.ndarray], meta: dict) -> SynthBlock:
    if "block_spec" not in meta:
        raise MissingTensorError("model metadata lacks 'block_spec'")
    spec = BlockSpec.from_dict(meta["block_spec"])

    def need(key):
        if key not in tensors:
            raise MissingTensorError(f"missing tensor '{key}'")
        return np.asarray(tensors[key], dtype=np.float64)

    linears = {}
    for name in meta["linears"]:
        bias = tensors.get(f"{name}.bias")
        linears[name] = LinearLayer(need(f"{name}.weight"), bias, name)
    norms = {name: need(f"{name}.weight") for name in meta["norms"]}
    experts = {name: need(f"{name}.weight") for name in meta["experts"]}
    matrix_norms = {
        name: MatrixGammaNorm(need(f"{name}.weight"), need(f"{name}.rotation"), cfg["eps"], cfg["symmetric"])
        for name, cfg in meta.get("matrix_norms", {}).items()
    }
    return SynthBlock(spec, linears, norms, experts, matrix_norms)


def save_model(path, block: SynthBlock, dtype: str = "f32", **extra) -> None:
    write_bbtt(path, block_tensors(block), block_metadata(block, **extra), dtype=dtype)


def load_model(path) -> tuple[SynthBlock, dict]:
    tensors, meta = read_bbtt(path)
    return block_from_tensors(tensors, meta), meta


def load_quantized_model(path) -> tuple[SynthBlock, dict]:
    """Dequantize every packed tensor and rebuild the block."""
    quantized, raw, meta = read_bbtq(path)
    tensors = dict(raw)
    for name, (qt, shape) in quantized.items():
        tensors[name] = dequantize(qt).reshape(shape)
    return block_from_tensors(tensors, meta), meta
