"""Backend selection for the convolution kernels.

The compiled extension is preferred. Set ``UNFOLDREG_PURE_PYTHON=1`` to force
the NumPy fallback (useful for debugging and for the benchmark).
"""

import os

from . import _conv_py

BACKEND = "python"
_impl = _conv_py

if os.environ.get("UNFOLDREG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _conv as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _conv_py

conv2d = _impl.conv2d
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weight = _impl.conv2d_grad_weight

__all__ = ["BACKEND", "conv2d", "conv2d_grad_input", "conv2d_grad_weight"]
