"""Kernel backend selection and thread configuration.

Two interchangeable implementations of the convolution gather/scatter
kernels exist: a numba-JIT one (default) and a pure-numpy one. The
environment variable SPARSEGAN_BACKEND picks one explicitly ("numba" or
"numpy"); unset means numba when importable, numpy otherwise.

SPARSEGAN_THREADS caps the JIT worker threads (default: hardware
parallelism). BLAS threading is controlled by the usual OMP/BLAS
environment variables of the host numpy.
"""

import os

from . import kernels_numpy

try:
    from . import kernels_numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    kernels_numba = None
    _HAVE_NUMBA = False

_BACKENDS = {"numpy": kernels_numpy}
if _HAVE_NUMBA:
    _BACKENDS["numba"] = kernels_numba


def _default_backend():
    requested = os.environ.get("SPARSEGAN_BACKEND", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            raise ValueError(
                f"SPARSEGAN_BACKEND={requested!r}: expected one of {sorted(_BACKENDS)}"
            )
        return requested
    return "numba" if _HAVE_NUMBA else "numpy"


_active = _default_backend()


def active_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    """Switch kernel implementations at runtime (used by tests/benchmarks)."""
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}: expected one of {sorted(_BACKENDS)}")
    global _active
    _active = name


def kernels():
    return _BACKENDS[_active]


def configure_threads() -> int:
    """Apply the SPARSEGAN_THREADS cap; returns the effective thread count."""
    n = os.cpu_count() or 1
    cap = os.environ.get("SPARSEGAN_THREADS")
    if cap:
        n = max(1, min(n, int(cap)))
    if _HAVE_NUMBA:
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    return n


configure_threads()
