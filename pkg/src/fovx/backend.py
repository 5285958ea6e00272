"""Kernel backend selection.

Hot loops in fovx.kernels exist twice: a numba @njit version and a pure
numpy fallback. The active backend is chosen once at import from the
FOVX_BACKEND environment variable ("numba", "numpy", or "auto") and can be
flipped at runtime with set_backend(), which benchmarks/bench_kernels.py
uses to time both paths on the same process.
"""

import os
import warnings

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

_VALID = ("numba", "numpy")


def _initial() -> str:
    req = os.environ.get("FOVX_BACKEND", "auto").lower()
    if req == "numpy":
        return "numpy"
    if req == "numba":
        if not HAS_NUMBA:
            warnings.warn("FOVX_BACKEND=numba but numba is not importable; using numpy")
            return "numpy"
        return "numba"
    return "numba" if HAS_NUMBA else "numpy"


_active = _initial()


def get_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in _VALID:
        raise ValueError(f"unknown backend {name!r}; expected one of {_VALID}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _active = name


def using_numba() -> bool:
    return _active == "numba"


def set_threads(n: int) -> None:
    """Cap worker threads for the numba backend (no-op for numpy)."""
    if HAS_NUMBA and n >= 1:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
