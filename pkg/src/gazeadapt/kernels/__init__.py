"""Hot numeric kernels with selectable backends.

Two interchangeable implementations exist: numba @njit loops and a
pure-numpy im2col/BLAS path. Selection order:

  1. ``GAZEADAPT_BACKEND`` environment variable (``numba`` or ``numpy``),
     read once at import;
  2. ``set_backend()`` at runtime (tests, benchmarks);
  3. numpy. On a single core with a fast BLAS the im2col path wins at the
     small shapes this package trains on (about 3-4x on the training loop,
     see benchmarks/bench_kernels.py), so it is the default; the numba
     loops avoid the im2col buffers and pull ahead once images get large
     relative to BLAS throughput.

Both backends implement the same math with fixed reduction orders, so each
is deterministic on its own; across backends results agree to float64
rounding, not bit-for-bit.
"""

import os
import warnings
from contextlib import contextmanager

from . import _numpy

try:
    from . import _numba
    _HAVE_NUMBA = True
except ImportError:
    _numba = None
    _HAVE_NUMBA = False

_IMPLS = {"numpy": _numpy}
if _HAVE_NUMBA:
    _IMPLS["numba"] = _numba

_active = None


def _initial_backend():
    requested = os.environ.get("GAZEADAPT_BACKEND", "").strip().lower()
    if requested:
        if requested not in ("numba", "numpy"):
            raise ValueError(f"unknown backend {requested!r} in GAZEADAPT_BACKEND")
        if requested == "numba" and not _HAVE_NUMBA:
            warnings.warn("numba requested but not importable; using numpy")
            return "numpy"
        return requested
    return "numpy"


_active = _initial_backend()


def get_backend():
    return _active


def set_backend(name):
    global _active
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r} (available: {sorted(_IMPLS)})")
    _active = name


@contextmanager
def backend(name):
    """Temporarily switch the kernel backend."""
    prev = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def conv2d(x, w, stride=1, pad=None):
    """2-D convolution (cross-correlation), NCHW, zero padding.

    pad defaults to kernel_size // 2 ("same" output for stride 1).
    """
    return _IMPLS[_active].conv2d(x, w, stride=stride, pad=pad)


def conv2d_input_grad(dy, w, in_hw, stride=1, pad=None):
    return _IMPLS[_active].conv2d_input_grad(dy, w, in_hw, stride=stride, pad=pad)


def conv2d_weight_grad(x, dy, kernel_hw, stride=1, pad=None):
    return _IMPLS[_active].conv2d_weight_grad(x, dy, kernel_hw, stride=stride, pad=pad)


def splat_gaussians(centers_yx, sigma, height, width):
    """Sum of unit-height isotropic Gaussians centered at (row, col) points."""
    return _IMPLS[_active].splat_gaussians(centers_yx, sigma, height, width)
