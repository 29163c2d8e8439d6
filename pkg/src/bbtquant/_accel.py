"""Backend selection for the hot kernels.

Every kernel in this package exists twice: a numba ``@njit`` loop and a
vectorised numpy path. Both perform the same floating-point operations in the
same order, so their outputs are bit-identical. Set ``BBT_DISABLE_NUMBA=1`` to
force the numpy path (also used automatically when numba is not importable).
"""
from __future__ import annotations

import contextlib
import os

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

HAS_NUMBA = numba is not None

_FALSY = {"", "0", "false", "no", "off"}


def _env_disabled() -> bool:
    return os.environ.get("BBT_DISABLE_NUMBA", "0").strip().lower() not in _FALSY


_use_numba = HAS_NUMBA and not _env_disabled()


def njit(*args, **kwargs):
    """``numba.njit`` when numba is present, otherwise an identity decorator."""
    if HAS_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def use_numba() -> bool:
    return _use_numba


def backend_name() -> str:
    return "numba" if _use_numba else "numpy"


def set_backend(name: str) -> None:
    global _use_numba
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r} (expected 'numba' or 'numpy')")


@contextlib.contextmanager
def backend(name: str):
    """Temporarily switch kernel backend."""
    prev = backend_name()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)
