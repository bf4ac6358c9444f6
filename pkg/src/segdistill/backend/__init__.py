"""Kernel backend selection.

The convolution/pooling inner loops exist twice: a compiled Cython module
(``segdistill.backend._native``) and a pure-numpy fallback (``fallback``).
The compiled module is preferred when importable; set ``SEGDISTILL_BACKEND``
to ``native`` or ``python`` to force one (forcing ``native`` when the
extension is missing raises at import).  ``SEGDISTILL_THREADS`` caps the
OpenMP thread count of the compiled kernels.
"""

import os

from . import fallback
from ..errors import ConfigError

_requested = os.environ.get("SEGDISTILL_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "native", "python"):
    raise ConfigError(f"SEGDISTILL_BACKEND must be auto|native|python, got {_requested!r}")

_impl = fallback
if _requested in ("auto", "native"):
    try:
        from . import _native as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "native":
            raise ConfigError("SEGDISTILL_BACKEND=native but the compiled "
                              "extension is not available") from None
        _impl = fallback

if _impl is not fallback:
    _threads = os.environ.get("SEGDISTILL_THREADS", "").strip()
    if _threads:
        try:
            _impl.set_num_threads(int(_threads))
        except ValueError:
            raise ConfigError(f"SEGDISTILL_THREADS must be an integer, got {_threads!r}") from None


def active_backend() -> str:
    """Name of the kernel implementation in use: ``native`` or ``python``."""
    return _impl.NAME


def get_backend(name: str = "active"):
    """Return a kernel module by name (``active``, ``native``, ``python``).

    Mostly for tests and the backend benchmark; regular code uses the
    module-level aliases below.
    """
    if name in ("active", "auto"):
        return _impl
    if name == "python":
        return fallback
    if name == "native":
        from . import _native
        return _native
    raise ConfigError(f"unknown backend {name!r}")


im2col = _impl.im2col
col2im = _impl.col2im
pool2_argmax = _impl.pool2_argmax
pool2_gather = _impl.pool2_gather
pool2_scatter = _impl.pool2_scatter
