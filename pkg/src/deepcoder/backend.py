"""Backend selection for the hot numerical kernels.

Two implementations of the same kernel set exist: a pure numpy one and a
numba-compiled one.  Which one runs is decided once at import time:

* ``DEEPCODER_BACKEND=numpy``  forces the numpy path.
* ``DEEPCODER_BACKEND=numba``  forces numba and fails loudly if it is missing.
* unset: numba when importable, numpy otherwise.

``DEEPCODER_THREADS`` caps the numba thread pool (the kernels themselves are
serial for determinism, but the cap also feeds the CLI's BLAS limiter).
"""

import os

from .errors import ConfigError

try:
    import numba  # noqa: F401
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

_VALID = ("numba", "numpy")


def _resolve() -> str:
    requested = os.environ.get("DEEPCODER_BACKEND", "").strip().lower()
    if requested == "":
        return "numba" if HAS_NUMBA else "numpy"
    if requested not in _VALID:
        raise ConfigError(
            f"DEEPCODER_BACKEND must be one of {_VALID}, got {requested!r}")
    if requested == "numba" and not HAS_NUMBA:
        raise ConfigError("DEEPCODER_BACKEND=numba but numba is not importable")
    return requested


BACKEND = _resolve()


def thread_limit() -> int:
    """Thread cap from DEEPCODER_THREADS, default 4, always >= 1."""
    raw = os.environ.get("DEEPCODER_THREADS", "4")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DEEPCODER_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"DEEPCODER_THREADS must be >= 1, got {n}")
    return n


if BACKEND == "numba":
    numba.set_num_threads(min(thread_limit(), numba.config.NUMBA_NUM_THREADS))
