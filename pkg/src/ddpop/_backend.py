"""Select the simulation kernel implementation at import time.

The compiled kernels are used when the extension imported cleanly and
``DDPOP_FORCE_PYTHON`` is not set to ``1``.
"""

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

FORCE_PYTHON = os.environ.get("DDPOP_FORCE_PYTHON", "") == "1"

BACKEND = "compiled" if (_ckernels is not None and not FORCE_PYTHON) else "python"


def compiled_available() -> bool:
    return _ckernels is not None


def kernels(backend: str | None = None):
    """Return the kernel module for ``backend`` (``"compiled"``, ``"python"`` or the default)."""
    backend = backend or BACKEND
    if backend == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not available in this installation")
        return _ckernels
    if backend == "python":
        return _pykernels
    raise ValueError(f"unknown backend {backend!r}")
