"""BBTT (dense tensors) and BBTQ (packed quantized tensors) containers.

Layout shared by both::

    magic (4 bytes) | u32 LE version | u64 LE manifest length | UTF-8 JSON manifest
    | zero padding to a 64-byte boundary | data sections, each 64-byte aligned

Offsets in the manifest are relative to the start of the data region. The
manifest is written with sorted keys so identical content gives identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from bbtquant.quant import QuantizedTensor

BBTT_MAGIC = b"BBTT"
BBTQ_MAGIC = b"BBTQ"
VERSION = 1
ALIGN = 64

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_SECTION_DTYPES = {
    "codes": np.dtype("u1"),
    "scales": np.dtype("<f4"),
    "zero_points": np.dtype("u1"),
    "group_offsets": np.dtype("<f4"),
}


class ContainerError(ValueError):
    pass


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


class _Payload:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.size = 0

    def add(self, arr: np.ndarray) -> dict:
        offset = _align(self.size)
        if offset > self.size:
            self.chunks.append(b"\0" * (offset - self.size))
        raw = np.ascontiguousarray(arr).tobytes()
        self.chunks.append(raw)
        self.size = offset + len(raw)
        return {"offset": offset, "nbytes": len(raw)}


def _write(path, magic: bytes, manifest: dict, payload: _Payload) -> None:
    head = _dumps(manifest)
    prefix = magic + struct.pack("<IQ", VERSION, len(head)) + head
    with open(path, "wb") as fh:
        fh.write(prefix)
        fh.write(b"\0" * (_align(len(prefix)) - len(prefix)))
        for chunk in payload.chunks:
            fh.write(chunk)


def _read(path, magic: bytes) -> tuple[dict, memoryview]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != magic:
        raise ContainerError(f"{path}: not a {magic.decode()} file")
    version, mlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported {magic.decode()} version {version}")
    manifest = json.loads(data[16 : 16 + mlen].decode("utf-8"))
    start = _align(16 + mlen)
    return manifest, memoryview(data)[start:]


def _view(body: memoryview, entry: dict, dtype: np.dtype, shape) -> np.ndarray:
    off, n = entry["offset"], entry["nbytes"]
    if off + n > len(body):
        raise ContainerError("truncated container: section runs past end of file")
    return np.frombuffer(body[off : off + n], dtype=dtype).reshape(shape).copy()


# --------------------------------------------------------------------------
# BBTT
# --------------------------------------------------------------------------

def write_bbtt(path, tensors: dict[str, np.ndarray], metadata: dict | None = None, dtype: str = "f32") -> None:
    if dtype not in _DTYPES:
        raise ContainerError(f"unsupported dtype {dtype!r}; expected f32 or f64")
    payload = _Payload()
    entries = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64).astype(_DTYPES[dtype])
        entry = {"name": name, "dtype": dtype, "shape": list(arr.shape)}
        entry.update(payload.add(arr))
        entries.append(entry)
    manifest = {"format": "BBTT", "version": VERSION, "metadata": metadata or {}, "tensors": entries}
    _write(path, BBTT_MAGIC, manifest, payload)


def read_bbtt(path) -> tuple[dict[str, np.ndarray], dict]:
    """Tensors (as float64) and the manifest metadata."""
    manifest, body = _read(path, BBTT_MAGIC)
    out = {}
    for e in manifest["tensors"]:
        if e["dtype"] not in _DTYPES:
            raise ContainerError(f"tensor {e['name']!r}: unknown dtype {e['dtype']!r}")
        out[e["name"]] = _view(body, e, _DTYPES[e["dtype"]], e["shape"]).astype(np.float64)
    return out, manifest.get("metadata", {})


def read_manifest(path) -> dict:
    magic = Path(path).read_bytes()[:4]
    if magic not in (BBTT_MAGIC, BBTQ_MAGIC):
        raise ContainerError(f"{path}: unknown container magic {magic!r}")
    return _read(path, magic)[0]


# --------------------------------------------------------------------------
# BBTQ
# --------------------------------------------------------------------------

def write_bbtq(path, quantized: dict[str, tuple[QuantizedTensor, tuple[int, ...]]],
               raw: dict[str, np.ndarray] | None = None, metadata: dict | None = None,
               raw_dtype: str = "f32") -> None:
    """``quantized`` maps names to ``(QuantizedTensor, original_shape)``.

    Unquantized tensors (norm gains, biases) go in ``raw``.
    """
    payload = _Payload()
    entries = []
    raw = raw or {}
    for name in sorted(set(quantized) | set(raw)):
        if name in quantized:
            qt, shape = quantized[name]
            sections = {}
            for key in ("codes", "scales", "zero_points", "group_offsets"):
                sections[key] = payload.add(np.asarray(getattr(qt, key)).astype(_SECTION_DTYPES[key]))
            entries.append({
                "name": name, "kind": "quantized", "bits": qt.bits, "group_size": qt.group_size,
                "shape": list(shape), "matrix_shape": list(qt.shape), "sections": sections,
            })
        else:
            arr = np.asarray(raw[name], dtype=np.float64).astype(_DTYPES[raw_dtype])
            entry = {"name": name, "kind": "raw", "dtype": raw_dtype, "shape": list(arr.shape)}
            entry.update(payload.add(arr))
            entries.append(entry)
    manifest = {"format": "BBTQ", "version": VERSION, "metadata": metadata or {}, "tensors": entries}
    _write(path, BBTQ_MAGIC, manifest, payload)


def read_bbtq(path) -> tuple[dict[str, tuple[QuantizedTensor, tuple[int, ...]]], dict[str, np.ndarray], dict]:
    manifest, body = _read(path, BBTQ_MAGIC)
    quantized, raw = {}, {}
    for e in manifest["tensors"]:
        if e["kind"] == "raw":
            raw[e["name"]] = _view(body, e, _DTYPES[e["dtype"]], e["shape"]).astype(np.float64)
            continue
        d_out, d_in = e["matrix_shape"]
        n_groups = -(-d_in // e["group_size"]) if d_in else 0
        sec = e["sections"]
        qt = QuantizedTensor(
            codes=_view(body, sec["codes"], _SECTION_DTYPES["codes"], (-1,)),
            bits=int(e["bits"]),
            group_size=int(e["group_size"]),
            scales=_view(body, sec["scales"], _SECTION_DTYPES["scales"], (d_out, n_groups)),
            zero_points=_view(body, sec["zero_points"], _SECTION_DTYPES["zero_points"], (d_out, n_groups)),
            group_offsets=_view(body, sec["group_offsets"], _SECTION_DTYPES["group_offsets"], (d_out, n_groups)),
            shape=(d_out, d_in),
        )
        quantized[e["name"]] = (qt, tuple(e["shape"]))
    return quantized, raw, manifest.get("metadata", {})
