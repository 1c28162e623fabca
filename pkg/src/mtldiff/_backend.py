"""Kernel backend selection.

Two interchangeable implementations of the hot kernels exist: the compiled
extension ``mtldiff._core`` and the numpy module ``mtldiff._kernels_py``.
The compiled one is used when importable, unless overridden through
:func:`set_backend` or the ``MTLDIFF_BACKEND`` environment variable
(``compiled`` | ``python`` | ``auto``).
"""

import logging
import os

from . import _kernels_py
from .errors import MtldiffError

log = logging.getLogger(__name__)

try:
    from . import _core as _compiled
except ImportError:  # extension not built; numpy fallback only
    _compiled = None

_KERNELS = {"python": _kernels_py}
if _compiled is not None:
    _KERNELS["compiled"] = _compiled

_active: str


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_KERNELS))

def active_backend() -> str:
    return _active


def set_backend(name: str) -> str:
    """Select the kernel implementation; returns the resolved backend name.

    ``auto`` prefers the compiled extension when present.  Requesting
    ``compiled`` without the extension built is an error.
    """
    global _active
    if name == "auto":
        name = "compiled" if _compiled is not None else "python"
    if name not in ("python", "compiled"):
        raise MtldiffError(f"unknown backend {name!r}; expected python, compiled, or auto")
    if name not in _KERNELS:
        raise MtldiffError("compiled backend requested but mtldiff._core is not built")
    _active = name
    return name


def kernels():
    """Return the active kernel module (mlp_forward/mlp_backward/dp_fill_*)."""
    return _KERNELS[_active]


_env = os.environ.get("MTLDIFF_BACKEND", "auto")
try:
    set_backend(_env)
except MtldiffError:
    log.warning("MTLDIFF_BACKEND=%s not usable, falling back to auto", _env)
    set_backend("auto")
