"""Kernel backend chosen at import.

``FCMG_BACKEND=python`` forces the numpy fallback; ``cython`` makes a missing
extension an error; the default uses the extension when it imports.
"""

import os

from . import _kernels_py

_choice = os.environ.get("FCMG_BACKEND", "auto").lower()

if _choice == "python":
    kernels = _kernels_py
elif _choice in ("auto", "cython"):
    try:
        from . import _kernels as kernels
    except ImportError:
        if _choice == "cython":
            raise
        kernels = _kernels_py
else:
    raise ImportError(f"unknown FCMG_BACKEND {_choice!r}")

BACKEND = kernels.BACKEND
SINGULAR_ERRORS = tuple({_kernels_py.SingularBlock, kernels.SingularBlock})


def get(name: str):
    """Kernel module by backend name, for side-by-side comparisons."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(name)
