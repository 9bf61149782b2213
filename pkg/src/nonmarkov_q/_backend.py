"""Kernel selection: the compiled extension when importable, else pure Python.

Set ``NONMARKOV_Q_BACKEND=python`` to force the fallback.
"""

import os

from . import _kernel_py

try:
    from . import _kernel as _compiled
except ImportError:  # extension not built
    _compiled = None

KERNELS = {"python": _kernel_py.run_chunk}
if _compiled is not None:
    KERNELS["cython"] = _compiled.run_chunk

_requested = os.environ.get("NONMARKOV_Q_BACKEND", "").strip().lower()
if _requested and _requested not in KERNELS:
    raise ImportError(f"backend {_requested!r} unavailable; have {sorted(KERNELS)}")
BACKEND = _requested or ("cython" if "cython" in KERNELS else "python")


def get_kernel(name=None):
    return KERNELS[name or BACKEND]
