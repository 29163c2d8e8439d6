"""JSON run reports and their schemas."""
from __future__ import annotations

import json
import platform
from importlib import resources

import jsonschema
import numpy as np

from bbtquant import __version__
from bbtquant._accel import backend_name
from bbtquant.containers import VERSION as CONTAINER_VERSION

REPORT_SCHEMA_VERSION = 1


def load_schema(name: str) -> dict:
    text = resources.files("bbtquant").joinpath("schemas", f"{name}.schema.json").read_text("utf-8")
    return json.loads(text)


def validate(doc: dict, name: str) -> None:
    jsonschema.validate(doc, load_schema(name))


def environment() -> dict:
    try:
        import numba
        numba_version = numba.__version__
    except ImportError:
        numba_version = None
    return {
        "tool_version": __version__,
        "bbtt_version": CONTAINER_VERSION,
        "bbtq_version": CONTAINER_VERSION,
        "report_schema_version": REPORT_SCHEMA_VERSION,
        "backend": backend_name(),
        "numpy_version": np.__version__,
        "numba_version": numba_version,
        "python_version": platform.python_version(),
    }


def layer_entry(name: str, *, rel_output_err=None, quant_mse=None, bits=None, group_size=None,
                mode=None, alpha=None, **extra) -> dict:
    entry = {
        "name": name,
        "rel_output_err": rel_output_err,
        "quant_mse": quant_mse,
        "bits": bits,
        "group_size": group_size,
        "mode": mode,
        "alpha": alpha,
    }
    entry.update(extra)
    return entry


def make_report(command: str, config: dict, metrics: dict) -> dict:
    metrics = {"layers": [], "proxy_metric": None, **metrics}
    report = {"command": command, "config": config, "metrics": metrics, "environment": environment()}
    report = json.loads(dumps(report))  # normalise numpy scalars and tuples
    validate(report, "run_report")
    return report


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_default) + "\n"


def metrics_bytes(report: dict) -> bytes:
    """Canonical bytes of the metrics block, for determinism checks."""
    return json.dumps(report["metrics"], sort_keys=True, separators=(",", ":")).encode("utf-8")


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")
