"""Support/query episodes: self-supervised (superpixel pseudo-masks) and downstream."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .superpixel import (
    DEFAULT_AREA,
    DEFAULT_K,
    DEFAULT_MIN_SIZE,
    DEFAULT_SIGMA,
    SegmentLabels,
    felzenszwalb,
    sample_pseudo_mask,
)

MAX_AUGMENT_RETRIES = 5


@dataclass(frozen=True)
class SuperpixelParams:
    k: float = DEFAULT_K
    min_size: int = DEFAULT_MIN_SIZE
    sigma: float = DEFAULT_SIGMA
    area_min: float = DEFAULT_AREA[0]
    area_max: float = DEFAULT_AREA[1]

    def segment(self, image) -> SegmentLabels:
        return felzenszwalb(image, self.k, self.min_size, self.sigma)


@dataclass(frozen=True)
class AugmentRanges:
    max_rotation: float = 20.0
    scale: tuple[float, float] = (0.9, 1.1)
    flip_prob: float = 0.5
    elastic_prob: float = 0.0
    elastic_alpha: float = 2.0
    gamma: tuple[float, float] = (0.7, 1.4)
    max_noise: float = 0.05

    def __post_init__(self):
        if not 0 <= self.max_rotation <= 20:
            raise ValueError("rotation range must lie within [0, 20] degrees")
        if not 0.9 <= self.scale[0] <= self.scale[1] <= 1.1:
            raise ValueError("scale range must lie within [0.9, 1.1]")
        if not 0.7 <= self.gamma[0] <= self.gamma[1] <= 1.4:
            raise ValueError("gamma range must lie within [0.7, 1.4]")
        if not 0 <= self.max_noise <= 0.05:
            raise ValueError("noise stddev must lie within [0, 0.05]")


@dataclass(frozen=True)
class AugmentSpec:
    rotation: float = 0.0
    scale: float = 1.0
    flip: bool = False
    elastic: bool = False
    elastic_seed: int = 0
    elastic_alpha: float = 0.0
    gamma: float = 1.0
    noise: float = 0.0
    noise_seed: int = 0

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls()

    @classmethod
    def draw(cls, rng: np.random.Generator, ranges: AugmentRanges = AugmentRanges()) -> "AugmentSpec":
        rotation = float(rng.uniform(-ranges.max_rotation, ranges.max_rotation))
        scale = float(rng.uniform(*ranges.scale))
        flip = bool(rng.random() < ranges.flip_prob)
        elastic = bool(rng.random() < ranges.elastic_prob)
        elastic_seed = int(rng.integers(2**31))
        gamma = float(np.exp(rng.uniform(np.log(ranges.gamma[0]), np.log(ranges.gamma[1]))))
        noise = float(rng.uniform(0.0, ranges.max_noise))
        noise_seed = int(rng.integers(2**31))
        return cls(rotation, scale, flip, elastic, elastic_seed,
                   ranges.elastic_alpha if elastic else 0.0, gamma, noise, noise_seed)

    @property
    def is_geometric_identity(self) -> bool:
        return self.rotation == 0.0 and self.scale == 1.0 and not self.elastic

    def _coords(self, shape) -> np.ndarray:
        """Source coordinates sampled by each output pixel."""
        h, w = shape
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        dy, dx = yy - cy, xx - cx
        if self.flip:
            dx = -dx
        th = np.deg2rad(self.rotation)
        cos, sin = np.cos(th), np.sin(th)
        sy = (cos * dy - sin * dx) / self.scale + cy
        sx = (sin * dy + cos * dx) / self.scale + cx
        if self.elastic:
            erng = np.random.default_rng(self.elastic_seed)
            field_y = ndimage.gaussian_filter(erng.uniform(-1, 1, shape), 4.0)
            field_x = ndimage.gaussian_filter(erng.uniform(-1, 1, shape), 4.0)
            norm = max(np.abs(field_y).max(), np.abs(field_x).max(), 1e-12)
            sy = sy + self.elastic_alpha * field_y / norm
            sx = sx + self.elastic_alpha * field_x / norm
        return np.stack([sy, sx])

    def warp(self, image: np.ndarray, order: int) -> np.ndarray:
        """Geometric part only; ``order`` 1 for images, 0 for masks."""
        if self.is_geometric_identity:
            out = image[:, ::-1] if self.flip else image
            return np.ascontiguousarray(out)
        out = ndimage.map_coordinates(image.astype(np.float64), self._coords(image.shape),
                                      order=order, mode="constant", cval=0.0)
        return out.astype(image.dtype)

    def intensity(self, image: np.ndarray) -> np.ndarray:
        out = image.astype(np.float64)
        if self.gamma != 1.0:
            out = np.power(np.clip(out, 0.0, 1.0), self.gamma)
        if self.noise > 0:
            out = out + np.random.default_rng(self.noise_seed).normal(0.0, self.noise, out.shape)
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    def apply(self, image: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        img = self.intensity(self.warp(image.astype(np.float32), order=1))
        msk = (self.warp(mask.astype(np.uint8), order=0) > 0).astype(np.uint8)
        return img, msk


@dataclass
class Episode:
    support_image: np.ndarray
    support_mask: np.ndarray
    query_image: np.ndarray
    query_gt_mask: np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Skipped:
    """Marker for a (class, part) pair the support scan cannot supply."""

    class_id: int
    part_index: int
    reason: str = "class absent from support slice"


def _view(image, mask, rng, ranges, forced: AugmentSpec | None):
    if forced is not None:
        img, msk = forced.apply(image, mask)
        if msk.any():
            return img, msk, forced
    else:
        for _ in range(MAX_AUGMENT_RETRIES + 1):
            spec = AugmentSpec.draw(rng, ranges)
            img, msk = spec.apply(image, mask)
            if msk.any():
                return img, msk, spec
    spec = AugmentSpec.identity()
    img, msk = spec.apply(image, mask)
    return img, msk, spec


def make_episode(slice_image, rng: np.random.Generator, sp: SuperpixelParams = SuperpixelParams(),
                 ranges: AugmentRanges = AugmentRanges(), segments: SegmentLabels | None = None,
                 support_spec: AugmentSpec | None = None, query_spec: AugmentSpec | None = None,
                 meta: dict | None = None, labels_unused=None) -> Episode:
    """Self-supervised episode: one superpixel as the mask, two augmented views.

    ``segments`` may carry precomputed superpixels of the raw slice. Forced
    specs replace the random draws (used for tests and ablations).
    """
    image = np.asarray(slice_image, dtype=np.float32)
    if segments is None:
        segments = sp.segment(image)
    mask = sample_pseudo_mask(segments, rng, sp.area_min, sp.area_max)
    s_img, s_msk, s_spec = _view(image, mask, rng, ranges, support_spec)
    q_img, q_msk, q_spec = _view(image, mask, rng, ranges, query_spec)
    info = dict(meta or {})
    info.update(support_aug=asdict(s_spec), query_aug=asdict(q_spec))
    return Episode(s_img, s_msk, q_img, q_msk, info)


def split_parts(n_slices: int, n_parts: int = 3) -> list[tuple[int, int]]:
    """(start, length) of ``n_parts`` contiguous parts; remainder to the earliest parts."""
    if n_slices < n_parts:
        raise ValueError(f"cannot split {n_slices} slices into {n_parts} parts")
    base, extra = divmod(n_slices, n_parts)
    parts, start = [], 0
    for p in range(n_parts):
        length = base + (1 if p < extra else 0)
        parts.append((start, length))
        start += length
    return parts


def middle_index(n_slices: int, part_index: int, n_parts: int = 3) -> int:
    start, length = split_parts(n_slices, n_parts)[part_index]
    return start + length // 2


def downstream_episode(support_scan, support_labelmap, query_slice, query_labels, class_id: int,
                       part_index: int, n_parts: int = 3) -> Episode | Skipped:
    """Evaluation episode: labelled middle slice of a support-scan part vs one query slice."""
    z = middle_index(len(support_scan), part_index, n_parts)
    s_mask = (np.asarray(support_labelmap[z]) == class_id).astype(np.uint8)
    if not s_mask.any():
        return Skipped(class_id, part_index)
    q_mask = (np.asarray(query_labels) == class_id).astype(np.uint8)
    return Episode(np.asarray(support_scan[z], dtype=np.float32), s_mask,
                   np.asarray(query_slice, dtype=np.float32), q_mask,
                   {"support_slice": z, "class_id": class_id, "part": part_index})
