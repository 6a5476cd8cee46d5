"""Solver backend selection.

The compiled extension is preferred when present; the pure-Python fallback
implements the identical iteration on scipy sparse operations. Set
``STREAMDEMIX_BACKEND=python`` or ``=cython`` to force one (forcing the
extension raises if it is not built).
"""

import os

_requested = os.environ.get("STREAMDEMIX_BACKEND", "").strip().lower()

if _requested not in ("", "cython", "python"):
    raise ValueError(f"unknown STREAMDEMIX_BACKEND value: {_requested!r}")

if _requested == "python":
    from ._fallback import solve_nonneg_lasso

    BACKEND = "python"
else:
    try:
        from ._core import solve_nonneg_lasso

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        from ._fallback import solve_nonneg_lasso

        BACKEND = "python"

__all__ = ["solve_nonneg_lasso", "BACKEND"]
