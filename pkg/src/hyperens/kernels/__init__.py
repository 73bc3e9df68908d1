"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled extension (``_ckernels``) is used when it was built and the
``HYPERENS_PURE_PYTHON`` environment variable is unset or ``0``. Both
backends expose the same four functions on float64 C-contiguous arrays.
Greedy scoring defaults to numpy on either backend because it measures faster.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("HYPERENS_PURE_PYTHON", "0") in ("", "0"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, kernel, stride=1, impl=None):
    impl = impl or _impl
    return impl.conv2d_forward(_c(x), _c(kernel), int(stride))


def conv2d_backward_kernel(x, grad_out, size, stride=1, impl=None):
    impl = impl or _impl
    return impl.conv2d_backward_kernel(_c(x), _c(grad_out), int(size), int(stride))


def conv2d_backward_input(grad_out, kernel, input_shape, stride=1, impl=None):
    impl = impl or _impl
    return impl.conv2d_backward_input(_c(grad_out), _c(kernel), tuple(int(d) for d in input_shape),
                                      int(stride))


def greedy_scores(true_probs, running_sum, count, floor=1e-12, impl=None):
    # numpy's vectorized log outruns the scalar compiled loop here, so it stays the default
    impl = impl or _pykernels
    return impl.greedy_scores(_c(true_probs), _c(running_sum), float(count), float(floor))


def backends():
    """Return the available backend modules keyed by name."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
