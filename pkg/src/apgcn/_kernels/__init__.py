"""Kernel dispatch for the sparse propagation product.

The compiled extension is preferred; set APGCN_PURE_PYTHON=1 to force
the numpy fallback (or rely on it automatically when the extension was
not built). ``BACKEND`` records which one is active.
"""

import os

import numpy as np

from . import _pyref

if os.environ.get("APGCN_PURE_PYTHON", "0") not in ("", "0"):
    _impl = _pyref
    BACKEND = "python"
else:
    try:
        from . import _spmm as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _pyref
        BACKEND = "python"


def spmm(indptr, indices, values, dense):
    """Sparse (CSR) times dense matrix product.

    The caller guarantees index validity; only dtypes and layout are
    coerced here because this sits on the per-step training path.
    """
    if values.dtype != dense.dtype:
        raise ValueError(f"dtype mismatch: values {values.dtype} vs dense {dense.dtype}")
    dense = np.ascontiguousarray(dense)
    return _impl.spmm(indptr, indices, values, dense)
