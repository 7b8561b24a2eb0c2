# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled separating-axis test for oriented rectangles."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, fabs

cnp.import_array()


cdef inline bint _overlap(double ax, double ay, double ah, double al, double aw,
                          double bx, double by, double bh, double bl, double bw) noexcept nogil:
    cdef double dx = bx - ax, dy = by - ay
    cdef double ca = cos(ah), sa = sin(ah), cb = cos(bh), sb = sin(bh)
    cdef double hal = 0.5 * al, haw = 0.5 * aw, hbl = 0.5 * bl, hbw = 0.5 * bw
    cdef double dot_ll = fabs(ca * cb + sa * sb)
    cdef double dot_ls = fabs(-ca * sb + sa * cb)
    if fabs(dx * ca + dy * sa) > hal + hbl * dot_ll + hbw * dot_ls:
        return 0
    if fabs(-dx * sa + dy * ca) > haw + hbl * dot_ls + hbw * dot_ll:
        return 0
    if fabs(dx * cb + dy * sb) > hbl + hal * dot_ll + haw * dot_ls:
        return 0
    if fabs(-dx * sb + dy * cb) > hbw + hal * dot_ls + haw * dot_ll:
        return 0
    return 1


def overlap_many(ax, ay, ah, al, aw, bx, by, bh, bl, bw):
    """Row-wise overlap of rectangles ``a[i]`` and ``b[i]``; touching counts."""
    arrs = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (ax, ay, ah, al, aw, bx, by, bh, bl, bw)))
    shape = arrs[0].shape
    cdef cnp.ndarray[cnp.float64_t, ndim=2] m = np.ascontiguousarray(
        np.stack([a.reshape(-1) for a in arrs]), dtype=np.float64)
    cdef Py_ssize_t n = m.shape[1], i
    out = np.empty(n, dtype=np.bool_)
    cdef cnp.npy_bool[::1] o = out
    cdef double[:, ::1] v = m
    with nogil:
        for i in range(n):
            o[i] = _overlap(v[0, i], v[1, i], v[2, i], v[3, i], v[4, i],
                            v[5, i], v[6, i], v[7, i], v[8, i], v[9, i])
    return out.reshape(shape)
