"""Kernel backend selection.

The compiled extension is used when it imports; set ``LRMC_BACKEND=python``
to force the numpy fallback.
"""
import os

from . import _pykernels

BACKENDS = {"python": _pykernels}

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["compiled"] = _ckernels

_requested = os.environ.get("LRMC_BACKEND", "").strip().lower()
if _requested == "python" or _ckernels is None:
    name = "python"
else:
    name = "compiled"
kernels = BACKENDS[name]


def use(backend):
    """Switch the active kernel backend for the whole process."""
    global kernels, name
    if backend not in BACKENDS:
        raise ValueError(f"backend {backend!r} unavailable; have {sorted(BACKENDS)}")
    name = backend
    kernels = BACKENDS[backend]
