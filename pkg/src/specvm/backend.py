"""Execution backend selection.

The interpreter core is written once as plain numpy code. By default it is
compiled with numba's nopython jit; setting SPECVM_BACKEND=numpy keeps the
same source running as ordinary Python over numpy scalars. Both paths must
produce bit-identical machine behaviour (the int64 edge cases that differ
between LLVM and numpy semantics are guarded inside the interpreter itself).
"""

import os

_choice = os.environ.get("SPECVM_BACKEND", "numba").strip().lower()
if _choice not in ("numba", "numpy"):
    raise RuntimeError(
        f"SPECVM_BACKEND must be 'numba' or 'numpy', got {_choice!r}")

if _choice == "numba":
    try:
        from numba import njit as _njit
    except ImportError:
        _choice = "numpy"

_BACKEND = _choice


def backend_name():
    return _BACKEND


def accelerate(fn):
    """Jit-compile fn on the numba backend, return it unchanged otherwise."""
    if _BACKEND == "numba":
        return _njit(cache=True)(fn)
    return fn
