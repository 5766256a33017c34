# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled union-find kernels for graph-based segmentation.

Same contract as ``_fhcore_py``; outputs must match it bit for bit.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t idx_t


cdef inline idx_t _find(idx_t[::1] parent, idx_t x) noexcept nogil:
    cdef idx_t root = x, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


cdef inline idx_t _union(idx_t[::1] parent, idx_t[::1] rank, idx_t[::1] size,
                         idx_t x, idx_t y) noexcept nogil:
    cdef idx_t t
    if rank[x] < rank[y]:
        t = x
        x = y
        y = t
    parent[y] = x
    size[x] += size[y]
    if rank[x] == rank[y]:
        rank[x] += 1
    return x


cdef cnp.ndarray _roots(idx_t[::1] parent):
    cdef Py_ssize_t i, n = parent.shape[0]
    out = np.empty(n, dtype=np.int64)
    cdef idx_t[::1] o = out
    for i in range(n):
        o[i] = _find(parent, i)
    return out


def fh_merge(Py_ssize_t n, a, b, w, double k):
    cdef idx_t[::1] av = np.ascontiguousarray(a, dtype=np.int64)
    cdef idx_t[::1] bv = np.ascontiguousarray(b, dtype=np.int64)
    cdef double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef idx_t[::1] parent = np.arange(n, dtype=np.int64)
    cdef idx_t[::1] rank = np.zeros(n, dtype=np.int64)
    cdef idx_t[::1] size = np.ones(n, dtype=np.int64)
    cdef double[::1] thresh = np.full(n, k, dtype=np.float64)
    cdef Py_ssize_t i, m = wv.shape[0]
    cdef idx_t ra, rb, r
    cdef double wi
    with nogil:
        for i in range(m):
            ra = _find(parent, av[i])
            rb = _find(parent, bv[i])
            if ra == rb:
                continue
            wi = wv[i]
            if wi <= thresh[ra] and wi <= thresh[rb]:
                r = _union(parent, rank, size, ra, rb)
                thresh[r] = wi + k / size[r]
    return _roots(parent)


def merge_small(labels, a, b, Py_ssize_t min_size):
    cdef idx_t[::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = lab.shape[0]
    cdef idx_t[::1] av = np.ascontiguousarray(a, dtype=np.int64)
    cdef idx_t[::1] bv = np.ascontiguousarray(b, dtype=np.int64)
    cdef idx_t[::1] parent = np.arange(n, dtype=np.int64)
    cdef idx_t[::1] rank = np.zeros(n, dtype=np.int64)
    cdef idx_t[::1] size = np.ones(n, dtype=np.int64)
    cdef Py_ssize_t i, m = av.shape[0]
    cdef idx_t ra, rb, ri, rr
    with nogil:
        for i in range(n):
            if lab[i] != i:
                ri = _find(parent, i)
                rr = _find(parent, lab[i])
                if ri != rr:
                    _union(parent, rank, size, rr, ri)
        for i in range(m):
            ra = _find(parent, av[i])
            rb = _find(parent, bv[i])
            if ra != rb and (size[ra] < min_size or size[rb] < min_size):
                _union(parent, rank, size, ra, rb)
    return _roots(parent)


def split_equal(labels, a, b):
    cdef idx_t[::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = lab.shape[0]
    cdef idx_t[::1] av = np.ascontiguousarray(a, dtype=np.int64)
    cdef idx_t[::1] bv = np.ascontiguousarray(b, dtype=np.int64)
    cdef idx_t[::1] parent = np.arange(n, dtype=np.int64)
    cdef idx_t[::1] rank = np.zeros(n, dtype=np.int64)
    cdef idx_t[::1] size = np.ones(n, dtype=np.int64)
    cdef Py_ssize_t i, m = av.shape[0]
    cdef idx_t ra, rb
    with nogil:
        for i in range(m):
            if lab[av[i]] != lab[bv[i]]:
                continue
            ra = _find(parent, av[i])
            rb = _find(parent, bv[i])
            if ra != rb:
                _union(parent, rank, size, ra, rb)
    return _roots(parent)
