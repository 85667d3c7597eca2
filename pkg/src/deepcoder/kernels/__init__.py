"""Hot kernels with a numba fast path and a numpy fallback.

The active implementation is fixed at import time by deepcoder.backend.
Both implementations share contracts and are cross-checked in the tests
and timed against each other in benchmarks/bench_backends.py.
"""

from ..backend import BACKEND
from . import _numpy_impl

if BACKEND == "numba":
    from . import _numba_impl as _impl
else:
    _impl = _numpy_impl

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_kernels = _impl.conv2d_backward_kernels
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
rbf_forward = _impl.rbf_forward
rbf_backward = _impl.rbf_backward

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_kernels",
    "maxpool_forward",
    "maxpool_backward",
    "rbf_forward",
    "rbf_backward",
]
