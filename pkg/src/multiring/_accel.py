"""Backend selection for the hot kernels.

``MULTIRING_BACKEND=numpy`` forces the pure-numpy path; ``numba`` (the default
when numba imports) uses the ``@njit`` kernels.
"""

from __future__ import annotations

import os

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is optional
    _numba = None

HAVE_NUMBA = _numba is not None


def _resolve() -> str:
    requested = os.environ.get("MULTIRING_BACKEND", "").strip().lower()
    if requested in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    if requested not in ("numba", "numpy"):
        raise ValueError(f"MULTIRING_BACKEND must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numba" and not HAVE_NUMBA:
        raise ImportError("MULTIRING_BACKEND=numba but numba is not installed")
    return requested


BACKEND = _resolve()


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        return _numba.njit(*args, **kwargs)

    def wrap(fn):
        return fn

    if args and callable(args[0]):
        return args[0]
    return wrap
