# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled reduction kernels with a pinned floating-point evaluation order.

Every reduction here accumulates in ascending index order, one fused
multiply-free add at a time, starting from +0.0. That order is the public
contract (see twotower.backend): the pure-python fallback replays the exact
same sequence of IEEE-754 double operations, so results are bitwise identical
across backends, across runs, and independent of how a batch is chunked into
microbatches (each output element depends only on its own row/column).

Compiled with -ffp-contract=off so the C compiler cannot fuse a*b+acc into an
FMA, which would change the rounding.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def matmul(double[:, :] a, double[:, :] b):
    """Matrix product with summation in ascending inner-index order.

    out[i, j] = sum_p a[i, p] * b[p, j], p ascending, accumulated from 0.0.
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t k = a.shape[1]
    cdef Py_ssize_t m = b.shape[1]
    if b.shape[0] != k:
        raise ValueError(
            f"matmul inner dimensions differ: ({n},{k}) @ ({b.shape[0]},{m})"
        )
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double aip
    for i in range(n):
        for p in range(k):
            aip = a[i, p]
            for j in range(m):
                out[i, j] = out[i, j] + aip * b[p, j]
    return out_arr


def row_sum(double[:, :] a):
    """Per-row sum in ascending column order, accumulated from 0.0."""
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t d = a.shape[1]
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc = acc + a[i, j]
        out[i] = acc
    return out_arr
