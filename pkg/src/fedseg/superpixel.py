"""Felzenszwalb graph-based superpixels and pseudo-mask sampling.

The union-find loops are the hot path; they come from the compiled
``_fhcore`` extension when it is importable, otherwise from the pure-Python
``_fhcore_py`` twin. Set ``FEDSEG_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import DimensionError

if os.environ.get("FEDSEG_PURE_PYTHON") == "1":
    from . import _fhcore_py as _core
else:
    try:
        from . import _fhcore as _core
    except ImportError:  # extension not built
        from . import _fhcore_py as _core

BACKEND = "cython" if _core.__name__.endswith("_fhcore") else "python"

# defaults for [0,1] images: k = 100/255
DEFAULT_K = 100.0 / 255.0
DEFAULT_MIN_SIZE = 32
DEFAULT_SIGMA = 0.8
DEFAULT_AREA = (0.004, 0.40)


@dataclass(frozen=True)
class SegmentLabels:
    labels: np.ndarray
    num_segments: int

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.num_segments)


def grid_edges(h: int, w: int, connectivity: int = 8):
    """Edge endpoints of an ``h x w`` grid graph in (row, col, direction) order.

    Directions per pixel: right, down, down-right, down-left (the last two only
    for 8-connectivity).
    """
    idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    offsets = [(0, 1), (1, 0)] if connectivity == 4 else [(0, 1), (1, 0), (1, 1), (1, -1)]
    a_parts, b_parts, keys = [], [], []
    for d, (dy, dx) in enumerate(offsets):
        ys, xs = np.mgrid[0:h, 0:w]
        ok = (ys + dy < h) & (xs + dx >= 0) & (xs + dx < w)
        src = idx[ok]
        dst = idx[ys[ok] + dy, xs[ok] + dx]
        a_parts.append(src)
        b_parts.append(dst)
        keys.append(src * len(offsets) + d)
    a = np.concatenate(a_parts)
    b = np.concatenate(b_parts)
    order = np.argsort(np.concatenate(keys), kind="stable")
    return a[order], b[order]


def _dense_labels(roots: np.ndarray, shape) -> SegmentLabels:
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    # renumber by first occurrence in raster order
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return SegmentLabels(rank[inverse].reshape(shape).astype(np.int32), len(first))


def felzenszwalb(image, scale_k: float = DEFAULT_K, min_size: int = DEFAULT_MIN_SIZE,
                 sigma: float = DEFAULT_SIGMA) -> SegmentLabels:
    """Segment a grayscale ``[0,1]`` image into superpixels.

    Components are built on the 8-connected grid with absolute intensity
    differences as weights, then small components are absorbed. A final pass
    splits any label that is only diagonally connected and re-absorbs small
    fragments along 4-connected edges, so every returned segment is
    4-connected and at least ``min_size`` pixels (unless the image is smaller).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 2 or img.shape[1] < 2:
        raise DimensionError(f"felzenszwalb needs a 2-D image of at least 2x2, got {img.shape}")
    if scale_k <= 0 or min_size < 1 or sigma < 0:
        raise ValueError("felzenszwalb: need scale_k > 0, min_size >= 1, sigma >= 0")
    h, w = img.shape
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma, truncate=3.0, mode="reflect")

    flat = img.ravel()
    a8, b8 = grid_edges(h, w, 8)
    w8 = np.abs(flat[a8] - flat[b8])
    order8 = np.argsort(w8, kind="stable")
    a8, b8, w8 = a8[order8], b8[order8], w8[order8]

    roots = _core.fh_merge(h * w, a8, b8, w8, float(scale_k))
    roots = _core.merge_small(roots, a8, b8, int(min_size))

    a4, b4 = grid_edges(h, w, 4)
    w4 = np.abs(flat[a4] - flat[b4])
    order4 = np.argsort(w4, kind="stable")
    a4, b4 = a4[order4], b4[order4]
    roots = _core.split_equal(roots, a4, b4)
    roots = _core.merge_small(roots, a4, b4, int(min_size))
    return _dense_labels(roots, (h, w))


def sample_pseudo_mask(labels: SegmentLabels, rng: np.random.Generator,
                       area_min_frac: float = DEFAULT_AREA[0],
                       area_max_frac: float = DEFAULT_AREA[1]) -> np.ndarray:
    """Pick one superpixel uniformly among those within the area bounds.

    Falls back to the segment whose area is closest to the admissible
    interval when none qualifies (ties go to the lowest label).
    """
    if not 0 <= area_min_frac < area_max_frac <= 1:
        raise ValueError("sample_pseudo_mask: need 0 <= area_min_frac < area_max_frac <= 1")
    sizes = labels.sizes()
    total = labels.labels.size
    lo, hi = area_min_frac * total, area_max_frac * total
    ok = np.flatnonzero((sizes >= lo) & (sizes <= hi))
    if ok.size:
        chosen = int(ok[rng.integers(ok.size)])
    else:
        gap = np.maximum(lo - sizes, 0) + np.maximum(sizes - hi, 0)
        chosen = int(np.argmin(gap))
    return (labels.labels == chosen).astype(np.uint8)
