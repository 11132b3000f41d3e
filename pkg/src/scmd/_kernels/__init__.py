"""Numeric kernel backends.

The hot array kernels exist twice: a Cython extension (``_core``) built at
install time and a pure-numpy fallback with the identical function surface.
Selection happens once at import. ``SCMD_KERNELS`` forces a choice:

    auto      compiled if importable, else numpy (default)
    compiled  require the extension, fail loudly if missing
    numpy     ignore the extension
"""

import os

from . import numpy_backend

_choice = os.environ.get("SCMD_KERNELS", "auto")
if _choice not in ("auto", "compiled", "numpy"):
    raise ValueError(f"SCMD_KERNELS must be auto|compiled|numpy, got {_choice!r}")

backend = numpy_backend
if _choice in ("auto", "compiled"):
    try:
        from . import _core as _compiled_backend

        backend = _compiled_backend
    except ImportError:
        if _choice == "compiled":
            raise


def backend_name():
    return backend.NAME
