"""Elementwise activation kernels, compiled when available.

The Cython extension ``ratioflow._kernels`` is used if it was built; otherwise
the numpy versions in ``ratioflow._kernels_py`` are used.  Set
``RATIOFLOW_PURE_PYTHON=1`` to force the fallback.
"""

import os

from ._kernels_py import SELU_ALPHA, SELU_LAMBDA
from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("RATIOFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

selu = _impl.selu
selu_with_grad = _impl.selu_with_grad
selu_jvp = _impl.selu_jvp

__all__ = ["BACKEND", "SELU_ALPHA", "SELU_LAMBDA", "selu", "selu_jvp", "selu_with_grad"]
