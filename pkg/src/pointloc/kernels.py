"""Hot-kernel dispatch.

Two interchangeable implementations exist for every hot kernel: numba
direct loops (kernels_numba) and pure NumPy (kernels_numpy). Selection is
controlled by the POINTLOC_KERNELS environment variable, read at import:

  POINTLOC_KERNELS=numpy   pure NumPy everywhere (always available)
  POINTLOC_KERNELS=numba   numba loops everywhere (errors if numba missing)
  POINTLOC_KERNELS=auto    per-kernel winner (default)

In auto mode convolutions run through the NumPy im2col/BLAS path, which
benchmarks several times faster than direct loops on typical hosts because
the work is one large sgemm, while the pooling kernels run through numba,
which avoids the window reshuffle and wins by an order of magnitude. See
benchmarks/bench_kernels.py for the measurements behind this split.
"""

import os

from . import kernels_numpy as _np_impl

try:
    from . import kernels_numba as _nb_impl

    NUMBA_AVAILABLE = True
except ImportError:
    _nb_impl = None
    NUMBA_AVAILABLE = False

_KERNEL_NAMES = (
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
    "maxpool_forward",
    "maxpool_backward",
    "elu_forward",
    "elu_backward",
)

# auto-mode winners, from benchmarks/bench_kernels.py
_AUTO_NUMBA = {"maxpool_forward", "maxpool_backward"}


def _resolve_mode():
    mode = os.environ.get("POINTLOC_KERNELS", "auto").strip().lower()
    if mode not in ("auto", "numba", "numpy"):
        raise ValueError(
            f"POINTLOC_KERNELS must be auto, numba or numpy, got {mode!r}"
        )
    if mode == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("POINTLOC_KERNELS=numba but numba is not importable")
    if mode == "auto" and not NUMBA_AVAILABLE:
        mode = "numpy"
    return mode


_MODE = _resolve_mode()


def _pick(name):
    if _MODE == "numpy":
        return getattr(_np_impl, name)
    if _MODE == "numba":
        return getattr(_nb_impl, name)
    impl = _nb_impl if name in _AUTO_NUMBA else _np_impl
    return getattr(impl, name)


conv2d_forward = _pick("conv2d_forward")
conv2d_backward_input = _pick("conv2d_backward_input")
conv2d_backward_weight = _pick("conv2d_backward_weight")
maxpool_forward = _pick("maxpool_forward")
maxpool_backward = _pick("maxpool_backward")
elu_forward = _pick("elu_forward")
elu_backward = _pick("elu_backward")


def backend_summary():
    """Mapping kernel name -> 'numba' | 'numpy' for the active selection."""
    out = {}
    for name in _KERNEL_NAMES:
        fn = globals()[name]
        out[name] = "numba" if (_nb_impl and fn is getattr(_nb_impl, name, None)) else "numpy"
    return out


def mode():
    return _MODE
