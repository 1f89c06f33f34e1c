"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
implementations take over. Set ``SEGDET_PURE_PYTHON=1`` to force the
fallback (the benchmark and the equivalence tests do this per call through
:data:`compiled` / :data:`fallback`).
"""
import os

from . import _kernels_py as fallback

compiled = None
if os.environ.get("SEGDET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled = None

backend = compiled if compiled is not None else fallback
BACKEND_NAME = "cython" if compiled is not None else "numpy"

shift_accumulate = backend.shift_accumulate
shift_scatter = backend.shift_scatter
maxpool_forward = backend.maxpool_forward
maxpool_backward = backend.maxpool_backward
nms_sorted = backend.nms_sorted

__all__ = [
    "BACKEND_NAME",
    "compiled",
    "fallback",
    "maxpool_backward",
    "maxpool_forward",
    "nms_sorted",
    "shift_accumulate",
    "shift_scatter",
]
