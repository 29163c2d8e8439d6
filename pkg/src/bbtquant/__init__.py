"""Influence-adaptive Walsh-Hadamard pre-quantization for synthetic transformer blocks."""

__version__ = "0.1.0"

from bbtquant.calib import channel_scales, so2_eigenbasis, spectral_energy
from bbtquant.quant import QuantizedTensor, dequantize, quantize_groupwise, signround_refine
from bbtquant.synth import BlockSpec, build_block, forward
from bbtquant.transform import BlockTransform, TransformRecord, invert_block, prepare_block
from bbtquant.wht import fwht_normalized, next_pow2, pad_columns

__all__ = [
    "BlockSpec",
    "BlockTransform",
    "QuantizedTensor",
    "TransformRecord",
    "build_block",
    "channel_scales",
    "dequantize",
    "forward",
    "fwht_normalized",
    "invert_block",
    "next_pow2",
    "pad_columns",
    "prepare_block",
    "quantize_groupwise",
    "signround_refine",
    "so2_eigenbasis",
    "spectral_energy",
]
