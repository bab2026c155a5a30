"""Backend selection for the convolution patch kernels.

The compiled extension is used when it was built; otherwise the numpy fallback
is loaded. Setting ``MF_PURE_PYTHON=1`` forces the fallback. Both backends
accumulate in the same order, so results are bit-identical between them.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("MF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im

__all__ = ["BACKEND", "im2col", "col2im"]
