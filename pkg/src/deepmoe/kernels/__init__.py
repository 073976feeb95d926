"""Backend selection for the hot convolution kernels.

Two interchangeable implementations exist: numba-compiled loops and a pure
numpy fallback. Selection happens once at import time from the environment
variable ``DEEPMOE_BACKEND``:

    DEEPMOE_BACKEND=numba   force the numba kernels (error if unavailable)
    DEEPMOE_BACKEND=numpy   force the pure-numpy kernels
    unset / "auto"          numba when importable, numpy otherwise

``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from . import numpy_impl

_requested = os.environ.get("DEEPMOE_BACKEND", "auto").lower()

if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"DEEPMOE_BACKEND must be 'numba', 'numpy' or 'auto', got {_requested!r}"
    )

if _requested == "numpy":
    _impl = numpy_impl
    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = numpy_impl
        BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im


def get_backend(name: str):
    """Return the (im2col, col2im) pair for an explicit backend name."""
    if name == "numpy":
        return numpy_impl.im2col, numpy_impl.col2im
    if name == "numba":
        from . import numba_impl

        return numba_impl.im2col, numba_impl.col2im
    raise ValueError(f"unknown backend {name!r}")
