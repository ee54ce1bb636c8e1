# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled spike attention-map kernels.

Event-driven inner loops: zero entries are skipped, and every output value
is produced exclusively by additions and subtractions.  Inputs are 3-D
contiguous float32 arrays with a flattened batch as the leading axis.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def binary_map(const float[:, :, ::1] q, const float[:, :, ::1] k):
    cdef Py_ssize_t b = q.shape[0], n1 = q.shape[1], d = q.shape[2]
    cdef Py_ssize_t n2 = k.shape[1]
    out_arr = np.zeros((b, n1, n2), np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef Py_ssize_t ib, i, j, t
    for ib in range(b):
        for i in range(n1):
            for t in range(d):
                if q[ib, i, t] == 1.0:
                    for j in range(n2):
                        out[ib, i, j] += k[ib, j, t]
    return out_arr


def ternary_map(const float[:, :, ::1] q, const float[:, :, ::1] k):
    cdef Py_ssize_t b = q.shape[0], n1 = q.shape[1], d = q.shape[2]
    cdef Py_ssize_t n2 = k.shape[1]
    out_arr = np.zeros((b, n1, n2), np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef Py_ssize_t ib, i, j, t
    cdef float qv
    for ib in range(b):
        for i in range(n1):
            for t in range(d):
                qv = q[ib, i, t]
                if qv == 1.0:
                    for j in range(n2):
                        out[ib, i, j] += k[ib, j, t]
                elif qv == -1.0:
                    for j in range(n2):
                        out[ib, i, j] -= k[ib, j, t]
    return out_arr


def masked_value_sum(const float[:, :, ::1] mask, const float[:, :, ::1] v):
    cdef Py_ssize_t b = mask.shape[0], n1 = mask.shape[1], n2 = mask.shape[2]
    cdef Py_ssize_t dv = v.shape[2]
    out_arr = np.zeros((b, n1, dv), np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef Py_ssize_t ib, i, j, c
    for ib in range(b):
        for i in range(n1):
            for j in range(n2):
                if mask[ib, i, j] == 1.0:
                    for c in range(dv):
                        out[ib, i, c] += v[ib, j, c]
    return out_arr


def weighted_value_sum(const float[:, :, ::1] a, const float[:, :, ::1] v):
    cdef Py_ssize_t b = a.shape[0], n1 = a.shape[1], n2 = a.shape[2]
    cdef Py_ssize_t dv = v.shape[2]
    out_arr = np.zeros((b, n1, dv), np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef Py_ssize_t ib, i, j, c
    for ib in range(b):
        for j in range(n2):
            for c in range(dv):
                if v[ib, j, c] == 1.0:
                    for i in range(n1):
                        out[ib, i, c] += a[ib, i, j]
    return out_arr
