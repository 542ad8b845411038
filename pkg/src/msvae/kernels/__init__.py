"""Hot kernels with a compiled core and a pure-numpy fallback.

The compiled extension is preferred when importable.  Set MSVAE_KERNELS to
"python" or "cython" to force a backend; "cython" raises if the extension
is missing rather than silently falling back.
"""

from __future__ import annotations

import os

from . import reference

try:
    from . import _core
except ImportError:
    _core = None

_choice = os.environ.get("MSVAE_KERNELS", "auto").lower()
if _choice not in ("auto", "cython", "python"):
    raise ImportError(f"MSVAE_KERNELS must be auto, cython or python, got {_choice!r}")
if _choice == "cython" and _core is None:
    raise ImportError("MSVAE_KERNELS=cython but the compiled extension is not available")

_active = reference if (_choice == "python" or _core is None) else _core

state_l1_residuals = _active.state_l1_residuals
state_l1_residuals_grad = _active.state_l1_residuals_grad


def backend() -> str:
    """Name of the kernel backend selected at import time."""
    return "cython" if _active is _core else "python"


def available_backends() -> dict:
    """Importable kernel modules keyed by backend name."""
    found = {"python": reference}
    if _core is not None:
        found["cython"] = _core
    return found
