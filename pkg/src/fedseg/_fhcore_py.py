"""Pure-Python union-find kernels for graph-based segmentation.

Mirrors ``_fhcore.pyx`` exactly; used when the compiled extension is missing
or ``FEDSEG_PURE_PYTHON=1`` is set. All edge arrays are assumed pre-sorted in
the order the caller wants them processed.
"""

import numpy as np


def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        parent[x], x = root, parent[x]
    return root


def _union(parent, rank, size, x, y):
    if rank[x] < rank[y]:
        x, y = y, x
    parent[y] = x
    size[x] += size[y]
    if rank[x] == rank[y]:
        rank[x] += 1
    return x


def _roots(parent):
    return np.array([_find(parent, i) for i in range(len(parent))], dtype=np.int64)


def fh_merge(n, a, b, w, k):
    """Threshold merging: join when ``w <= min(Int(Ci) + k/|Ci|)``."""
    parent = list(range(n))
    rank = [0] * n
    size = [1] * n
    thresh = [float(k)] * n
    a, b, w = a.tolist(), b.tolist(), w.tolist()
    for i in range(len(w)):
        ra = _find(parent, a[i])
        rb = _find(parent, b[i])
        if ra == rb:
            continue
        wi = w[i]
        if wi <= thresh[ra] and wi <= thresh[rb]:
            r = _union(parent, rank, size, ra, rb)
            thresh[r] = wi + k / size[r]
    return _roots(parent)


def merge_small(labels, a, b, min_size):
    """Absorb components below ``min_size`` across the edges, in edge order."""
    n = len(labels)
    labels = labels.tolist()
    parent = list(range(n))
    rank = [0] * n
    size = [1] * n
    # seed the forest with the incoming partition
    for i in range(n):
        r = labels[i]
        if r != i:
            ri = _find(parent, i)
            rr = _find(parent, r)
            if ri != rr:
                _union(parent, rank, size, rr, ri)
    a, b = a.tolist(), b.tolist()
    for i in range(len(a)):
        ra = _find(parent, a[i])
        rb = _find(parent, b[i])
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            _union(parent, rank, size, ra, rb)
    return _roots(parent)


def split_equal(labels, a, b):
    """Connected components of the subgraph joining equal-labelled endpoints."""
    n = len(labels)
    labels = labels.tolist()
    parent = list(range(n))
    rank = [0] * n
    size = [1] * n
    a, b = a.tolist(), b.tolist()
    for i in range(len(a)):
        if labels[a[i]] != labels[b[i]]:
            continue
        ra = _find(parent, a[i])
        rb = _find(parent, b[i])
        if ra != rb:
            _union(parent, rank, size, ra, rb)
    return _roots(parent)
