"""Compute-kernel backends.

Two hot kernels carry a numba @njit implementation with a pure-numpy
fallback: the counter-based Philox generator and the 1-D HJB layer update.
The backend is picked once at import from the RCL_KERNELS environment
variable ("auto" | "numba" | "numpy"; default auto = numba when importable).

Both backends are bit-identical by construction: the Philox pipeline is
integer-only up to the uniform floats and the Box-Muller transform runs in
shared numpy code, while the HJB kernel uses only +,*,max. Switching the
flag changes speed, never results. `benchmarks/bench_kernels.py` times and
cross-checks the two paths.
"""

import os

from ..errors import ConfigError

_VALID = ("auto", "numba", "numpy")


def _detect_backend() -> str:
    choice = os.environ.get("RCL_KERNELS", "auto").lower()
    if choice not in _VALID:
        raise ConfigError(
            f"RCL_KERNELS must be one of {_VALID}, got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
        return "numba"
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"


_backend = _detect_backend()


def active_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Override the backend (tests/benchmarks). Returns the previous one."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ConfigError(f"backend must be 'numba' or 'numpy', got {name!r}")
    previous = _backend
    _backend = name
    return previous


from .philox import standard_normals, uniform_blocks, derive_seed  # noqa: E402
from .hjb_step import hjb_layer_update_1d  # noqa: E402

__all__ = [
    "active_backend",
    "set_backend",
    "standard_normals",
    "uniform_blocks",
    "derive_seed",
    "hjb_layer_update_1d",
]
