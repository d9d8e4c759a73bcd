# cython: boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled CSR kernels for the propagation hot loop.

Accumulation happens in float64 regardless of the input dtype so the
results match the numpy fallback bit for bit (no FMA contraction is
enabled in the build flags).
"""

import numpy as np

cimport numpy as cnp

ctypedef fused floating:
    float
    double


def spmm(const cnp.int64_t[::1] indptr, const cnp.int32_t[::1] indices,
         const floating[::1] values, const floating[:, ::1] dense):
    """CSR-times-dense product, row-major output of shape (n, dense.shape[1])."""
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t cols = dense.shape[1]
    cdef Py_ssize_t i, k, c, j

    if floating is float:
        out_np = np.zeros((n, cols), dtype=np.float32)
    else:
        out_np = np.zeros((n, cols), dtype=np.float64)
    cdef floating[:, ::1] out = out_np

    acc_np = np.zeros(cols, dtype=np.float64)
    cdef double[::1] acc = acc_np
    cdef double v

    for i in range(n):
        for c in range(cols):
            acc[c] = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            j = indices[k]
            v = <double> values[k]
            for c in range(cols):
                acc[c] += v * <double> dense[j, c]
        for c in range(cols):
            out[i, c] = <floating> acc[c]
    return out_np
