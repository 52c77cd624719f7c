# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# distutils: language = c++
"""Compiled kernels over coordinate-list matrices.

Every routine has a pure-Python twin in ``_pykernels`` with the same
signature; ``_backend`` picks one at import time.
"""
import numpy as np

from libc.math cimport fabs, INFINITY
from libcpp.vector cimport vector

ctypedef long long idx_t


cdef extern from "<algorithm>" namespace "std" nogil:
    void partial_sort[Iter](Iter first, Iter middle, Iter last)


def masked_dot(const double[:, ::1] L, const double[:, ::1] R,
               const idx_t[::1] rows, const idx_t[::1] cols):
    """Entries ``(L @ R.T)[rows[t], cols[t]]`` without forming the product."""
    cdef Py_ssize_t m = rows.shape[0], r = L.shape[1], t, q
    cdef idx_t i, j
    cdef double acc
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for t in range(m):
            i = rows[t]
            j = cols[t]
            acc = 0.0
            for q in range(r):
                acc = acc + L[i, q] * R[j, q]
            o[t] = acc
    return out


def full_dot(const double[:, ::1] L, const double[:, ::1] R):
    """Dense ``L @ R.T`` accumulated exactly like :func:`masked_dot`."""
    cdef Py_ssize_t n1 = L.shape[0], n2 = R.shape[0], r = L.shape[1], i, j, q
    cdef double acc
    out = np.empty((n1, n2), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n1):
            for j in range(n2):
                acc = 0.0
                for q in range(r):
                    acc = acc + L[i, q] * R[j, q]
                o[i, j] = acc
    return out


def masked_matmul(const idx_t[::1] out_idx, const idx_t[::1] in_idx,
                  const double[::1] vals, const double[:, ::1] B,
                  Py_ssize_t n_out):
    """Sparse-times-dense product ``M @ B`` for ``M`` in coordinate form.

    ``M[out_idx[t], in_idx[t]] = vals[t]``. Passing the column indices as
    ``out_idx`` yields ``M.T @ B``.
    """
    cdef Py_ssize_t m = vals.shape[0], r = B.shape[1], t, q
    cdef idx_t i, j
    cdef double v
    out = np.zeros((n_out, r), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for t in range(m):
            i = out_idx[t]
            j = in_idx[t]
            v = vals[t]
            for q in range(r):
                o[i, q] += v * B[j, q]
    return out


def segment_kth_largest(const double[::1] vals, const idx_t[::1] ptr,
                        Py_ssize_t k):
    """k-th largest magnitude per segment ``vals[ptr[s]:ptr[s+1]]``.

    Segments are implicitly padded with zeros, so a segment holding fewer
    than ``k`` entries has cutoff 0; ``k == 0`` gives ``inf``. Each segment
    is partially sorted (heap-based), so the cost grows with ``k``.
    """
    cdef Py_ssize_t nseg = ptr.shape[0] - 1, s, t, cnt, lo, longest = 0
    out = np.empty(nseg, dtype=np.float64)
    cdef double[::1] o = out
    cdef vector[double] buf
    if k == 0:
        out[:] = np.inf
        return out
    for s in range(nseg):
        if ptr[s + 1] - ptr[s] > longest:
            longest = ptr[s + 1] - ptr[s]
    buf.resize(longest if longest > 0 else 1)
    with nogil:
        for s in range(nseg):
            lo = ptr[s]
            cnt = ptr[s + 1] - lo
            if k > cnt:
                o[s] = 0.0
                continue
            for t in range(cnt):
                buf[t] = -fabs(vals[lo + t])
            partial_sort(buf.begin(), buf.begin() + k, buf.begin() + cnt)
            o[s] = -buf[k - 1]
    return out
