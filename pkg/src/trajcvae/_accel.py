"""Backend switch for the numeric kernels.

Numba is used when it imports and ``TRAJCVAE_DISABLE_NUMBA`` is unset (or
``0``). Setting the variable to ``1`` forces the pure-numpy path, which is
also what runs when numba is not installed.
"""
from __future__ import annotations

import os

try:
    import numba as _numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _numba = None
    HAS_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("TRAJCVAE_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


_use_numba = HAS_NUMBA and not _env_disabled()


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it untouched."""
    if not HAS_NUMBA:
        return fn
    return _numba.njit(cache=True, nogil=True)(fn)


def use_numba() -> bool:
    return _use_numba


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` at runtime (tests and benchmarks)."""
    global _use_numba
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")


def backend() -> str:
    return "numba" if _use_numba else "numpy"
