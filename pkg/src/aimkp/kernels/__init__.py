"""Hot kernels: compiled extension when available, numpy otherwise.

Set ``AIMKP_KERNELS=numpy`` to force the fallback, ``AIMKP_KERNELS=compiled``
to fail loudly if the extension is missing.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

from . import _numpy

_choice = os.environ.get("AIMKP_KERNELS", "auto").lower()

_compiled = None
if _choice != "numpy":
    try:
        from . import _ckernels as _compiled  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise
        _compiled = None

backend = _compiled if _compiled is not None else _numpy
BACKEND_NAME = "compiled" if _compiled is not None else "numpy"


def available_backends() -> dict:
    out = {"numpy": _numpy}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out


def set_backend(name: str):
    """Switch the active kernels; returns the previously active module."""
    global backend, BACKEND_NAME
    backends = available_backends()
    if name not in backends:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(backends)}")
    previous = backend
    backend, BACKEND_NAME = backends[name], name
    return previous


@contextmanager
def using(name: str):
    previous_name = BACKEND_NAME
    set_backend(name)
    try:
        yield backend
    finally:
        set_backend(previous_name)
