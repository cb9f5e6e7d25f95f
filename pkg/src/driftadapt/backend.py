"""Kernel backend selection.

The hot per-batch kernels exist twice: a compiled Cython core
(``driftadapt._core``) and a pure-numpy fallback (``_kernels_py``). At
import time the compiled core is preferred; ``DRIFTADAPT_BACKEND`` can
force one (``compiled`` or ``python``), and tests swap backends with
:func:`use`.
"""

import os

from . import _kernels_py

try:
    from . import _core
except ImportError:
    _core = None

_BACKENDS = {"python": _kernels_py}
if _core is not None:
    _BACKENDS["compiled"] = _core

K = None


def available_backends():
    return sorted(_BACKENDS)


def use(name):
    """Activate a backend by name; returns the previously active module."""
    global K
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    prev = K
    K = _BACKENDS[name]
    return prev


def active():
    return K.NAME


def _select_default():
    forced = os.environ.get("DRIFTADAPT_BACKEND", "").strip().lower()
    if forced:
        if forced not in _BACKENDS:
            raise ImportError(
                f"DRIFTADAPT_BACKEND={forced!r} but only {available_backends()} are available"
            )
        return forced
    return "compiled" if "compiled" in _BACKENDS else "python"


use(_select_default())
