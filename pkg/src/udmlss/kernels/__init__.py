"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built and ``UDML_PURE_PYTHON``
is unset (or ``0``). ``BACKEND`` names the active implementation.
"""
import os

from . import _pykernels

try:
    if os.environ.get("UDML_PURE_PYTHON", "0") not in ("", "0"):
        raise ImportError("pure python backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
sq_distances = _impl.sq_distances
assign_nearest = _impl.assign_nearest
mine_masks = _impl.mine_masks


def available_backends():
    """Map of backend name to kernel module for every importable backend."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        out["cython"] = _ckernels
    return out
