# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled retrieval scan: float64-accumulated dot products, float32 out.

Mirrors the contract of ``pure.dot_scores``. Reads the float32 store
directly (no float64 copy of the matrix), which is what makes it worth
compiling for stores in the tens of thousands of rows.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def dot_scores(matrix, query):
    """Dot product of every row of ``matrix`` against ``query``."""
    cdef cnp.ndarray[cnp.float32_t, ndim=2, mode="c"] m = np.ascontiguousarray(
        matrix, dtype=np.float32
    )
    cdef cnp.ndarray[cnp.float32_t, ndim=1, mode="c"] q = np.ascontiguousarray(
        query, dtype=np.float32
    )
    if m.shape[1] != q.shape[0]:
        raise ValueError(
            f"dimension mismatch: matrix has {m.shape[1]}, query has {q.shape[0]}"
        )
    cdef Py_ssize_t n = m.shape[0]
    cdef Py_ssize_t d = m.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=1, mode="c"] out = np.empty(n, dtype=np.float32)
    cdef Py_ssize_t i, j
    cdef Py_ssize_t d4 = d - (d % 4)
    cdef double s0, s1, s2, s3
    with nogil:
        for i in range(n):
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            s3 = 0.0
            for j in range(0, d4, 4):
                s0 += <double> m[i, j] * <double> q[j]
                s1 += <double> m[i, j + 1] * <double> q[j + 1]
                s2 += <double> m[i, j + 2] * <double> q[j + 2]
                s3 += <double> m[i, j + 3] * <double> q[j + 3]
            for j in range(d4, d):
                s0 += <double> m[i, j] * <double> q[j]
            out[i] = <cnp.float32_t> (s0 + (s1 + (s2 + s3)))
    return out
