"""Numpy reference implementations of the compiled kernels.

Kept semantically identical to the Cython versions in ``_spmm.pyx``:
products and partial sums are accumulated in float64 in both backends,
in the same order (ascending arc index within each row), so the two
produce identical bits for identical inputs.
"""

import numpy as np


def spmm(indptr, indices, values, dense):
    """CSR-times-dense product: out[i] = sum over row i arcs of values[k] * dense[indices[k]].

    indptr int64 (n+1,), indices int32, values/dense float32 or float64
    (matching dtypes). Returns (n, dense.shape[1]) in the input dtype.
    """
    n = indptr.shape[0] - 1
    cols = dense.shape[1]
    if values.shape[0] == 0:
        return np.zeros((n, cols), dtype=values.dtype)
    prod = values.astype(np.float64)[:, None] * dense.astype(np.float64)[indices]
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))
    out = np.empty((n, cols), dtype=np.float64)
    for c in range(cols):
        out[:, c] = np.bincount(rows, weights=prod[:, c], minlength=n)
    return out.astype(values.dtype, copy=False)
