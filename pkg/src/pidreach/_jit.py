"""Optional numba acceleration.

Set ``PIDREACH_NUMBA=0`` in the environment before import to force the
pure-numpy kernels.  Both backends give the same bounds bit for bit on
polynomial fields; anything through ``exp`` may differ in the last bits
(each side pads its own ``exp`` outward, so both stay sound).
"""
from __future__ import annotations

import os
import warnings

_FLAG = os.environ.get("PIDREACH_NUMBA", "1").strip().lower()

try:
    if _FLAG in ("0", "off", "false", "no"):
        raise ImportError("numba disabled by PIDREACH_NUMBA")
    import numba
    from numba import njit, prange

    # the image ships an old TBB; numba falls back to its own pool but warns first
    warnings.filterwarnings("ignore", message=".*TBB.*", module="numba")
    USING_NUMBA = True
except ImportError:
    numba = None
    USING_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def jit(*args, **kwargs):
    """``njit`` that is a no-op without numba.  Used for scalar helpers that
    must also run as plain Python."""
    return njit(*args, **kwargs)


def set_workers(n: int | None) -> None:
    if USING_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
