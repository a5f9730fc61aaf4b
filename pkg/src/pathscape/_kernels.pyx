# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. ``pathscape._kernels_py`` mirrors every function here."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t i64

# stage row layout, shared with _kernels_py
DEF KIND = 0
DEF KW = 1
DEF KH = 2
DEF SW = 3
DEF SH = 4
DEF DW = 5
DEF DH = 6
DEF PW = 7
DEF PH = 8
DEF CIN = 9
DEF COUT = 10
DEF INW = 11
DEF INH = 12


cdef i64 _descend(const i64[:, ::1] stages, Py_ssize_t depth, i64 c, i64 w, i64 h,
                  i64[:, :, ::1] counts) nogil:
    cdef Py_ssize_t n = stages.shape[0]
    cdef i64 kw, kh, ci, nw, nh, flat, area, visited = 0
    if depth == n:
        counts[c, w, h] += 1
        return 1
    if stages[depth, KIND] == 1:
        area = stages[depth, INW] * stages[depth, INH]
        flat = c
        return _descend(stages, depth + 1, flat // area, (flat % area) // stages[depth, INH],
                        flat % stages[depth, INH], counts)
    if c >= stages[depth, COUT]:
        return 0
    for kw in range(stages[depth, KW]):
        nw = w * stages[depth, SW] + kw * stages[depth, DW] - stages[depth, PW]
        if nw < 0 or nw >= stages[depth, INW]:
            continue
        for kh in range(stages[depth, KH]):
            nh = h * stages[depth, SH] + kh * stages[depth, DH] - stages[depth, PH]
            if nh < 0 or nh >= stages[depth, INH]:
                continue
            for ci in range(stages[depth, CIN]):
                visited += _descend(stages, depth + 1, ci, nw, nh, counts)
    return visited


def enumerate_chain(const i64[:, ::1] stages, i64 c, i64 w, i64 h, i64[:, :, ::1] counts):
    """Walk every in-bounds route of a layer chain from output unit (c, w, h).

    Increments ``counts[c_in, w_in, h_in]`` once per route and returns the number of
    routes visited. Command vectors whose out-channel does not match the current
    unit are dropped before descending, as are kernel offsets landing outside the
    input extent.
    """
    cdef i64 total
    with nogil:
        total = _descend(stages, 0, c, w, h, counts)
    return total


def scatter_add(const double[:, ::1] src, const i64[::1] index, Py_ssize_t size):
    """``out[b, index[m]] += src[b, m]`` for every ``index[m] >= 0``."""
    cdef Py_ssize_t b, m, nb = src.shape[0], nm = src.shape[1]
    cdef i64 j
    out = np.zeros((nb, size), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for b in range(nb):
            for m in range(nm):
                j = index[m]
                if j >= 0:
                    o[b, j] += src[b, m]
    return out
