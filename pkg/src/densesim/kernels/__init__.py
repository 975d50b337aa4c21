"""Kernel backend selection.

The compiled Cython backend is preferred when available; the numpy
reference backend is the fallback.  Force a choice with the environment
variable DENSESIM_KERNELS in {auto, cython, numpy} (read at import time).
"""

import os

from densesim.errors import ConfigError

from . import reference

_choice = os.environ.get("DENSESIM_KERNELS", "auto")
if _choice not in ("auto", "cython", "numpy"):
    raise ConfigError(f"DENSESIM_KERNELS must be auto, cython or numpy, got {_choice!r}")

if _choice == "numpy":
    _impl = reference
else:
    try:
        from . import _fast as _impl
    except ImportError:
        if _choice == "cython":
            raise
        _impl = reference

BACKEND = _impl.BACKEND_NAME
im2col = _impl.im2col
col2im = _impl.col2im
bilinear_forward = _impl.bilinear_forward
bilinear_backward_field = _impl.bilinear_backward_field
bilinear_backward_coords = _impl.bilinear_backward_coords


def get_backend(name):
    """Return the named backend module (for parity tests and benchmarks)."""
    if name == "numpy":
        return reference
    if name == "cython":
        from . import _fast

        return _fast
    raise ConfigError(f"unknown kernel backend {name!r}")
