"""Optional numba acceleration.

Set ``JBOT_NUMBA=0`` in the environment to force the pure-numpy kernels.
"""
import os

try:
    from numba import njit as _njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

NUMBA_ENABLED = NUMBA_AVAILABLE and os.environ.get("JBOT_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def optional_njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise.

    Compiling is decided by availability only; whether the compiled variant is
    *used* is decided by :data:`NUMBA_ENABLED` in :mod:`jbot.kernels`.
    """

    def decorator(func):
        if NUMBA_AVAILABLE:
            return _njit(*args, **kwargs)(func)
        return func

    return decorator
