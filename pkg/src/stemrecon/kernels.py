"""Backend selection for the point/atom interaction kernel.

The compiled extension is used when it was built; setting the environment
variable ``STEMRECON_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py.local_field

if not os.environ.get("STEMRECON_PURE_PYTHON"):
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        _impl = _kernels.local_field


def local_field(points, centers, heights, width, offset, radii, backend=None):
    """Dispatch to the selected backend (or an explicitly named one)."""
    if backend == "python":
        fn = _kernels_py.local_field
    elif backend == "cython":
        from . import _kernels  # type: ignore[attr-defined]

        fn = _kernels.local_field
    else:
        fn = _impl
    return fn(
        np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2),
        np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 2),
        np.ascontiguousarray(heights, dtype=np.float64),
        float(width),
        float(offset),
        np.ascontiguousarray(radii, dtype=np.float64),
    )


def available_backends():
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401  # type: ignore[attr-defined]
    except ImportError:
        return names
    return names + ["cython"]
