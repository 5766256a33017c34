"""Prototype-matching one-shot segmentation.

Pipeline: encode support and query -> pick foreground/background prototypes
from the support features under the downsampled mask -> score every query
location against every prototype -> blend the prototypes per location with
softmax weights -> classify each location by cosine similarity to the blended
foreground and background vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DimensionError, ModelParams, Tensor

FEATURE_STRIDE = 4


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3

    def __post_init__(self):
        if len(self.widths) != 3:
            raise ValueError("encoder uses exactly three convolution blocks")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        c_in = self.in_channels
        for i, c_out in enumerate(self.widths, start=1):
            shapes.append((f"conv{i}.weight", (c_out, c_in, self.kernel, self.kernel)))
            shapes.append((f"conv{i}.bias", (c_out,)))
            c_in = c_out
        return shapes

    def param_names(self) -> list[str]:
        return [name for name, _ in self.param_shapes()]

    def num_parameters(self) -> int:
        return int(sum(np.prod(s) for _, s in self.param_shapes()))


@dataclass(frozen=True)
class ProtoConfig:
    tau_fg: float = 0.5
    tau_bg: float = 0.5
    alpha_w: float = 20.0
    alpha_p: float = 20.0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)


def init_params(cfg: EncoderConfig, seed: int, dtype=np.float32) -> ModelParams:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    names, tensors = [], []
    for name, shape in cfg.param_shapes():
        if name.endswith("weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            arr = np.zeros(shape)
        names.append(name)
        tensors.append(Tensor(arr.astype(dtype), requires_grad=True))
    return ModelParams(names, tensors)


def encode(params: ModelParams, image) -> Tensor:
    """Features ``[C, H/4, W/4]`` of a ``[1,H,W]`` (or ``[H,W]``) image.

    Three 3x3 conv blocks; the first two end in ReLU and 2x2 mean pooling.
    """
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=params.tensors[0].dtype))
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 3 or x.shape[1] % FEATURE_STRIDE or x.shape[2] % FEATURE_STRIDE:
        raise DimensionError(f"encode: image extents {x.shape} must be [1,H,W] with H, W divisible by 4")
    w = params.tensors
    n_blocks = len(w) // 2
    for i in range(n_blocks):
        weight, bias = w[2 * i], w[2 * i + 1]
        x = T.conv2d(x, weight, stride=1, pad=weight.shape[-1] // 2) + bias.reshape(-1, 1, 1)
        if i < n_blocks - 1:
            x = T.avg_pool2d(T.relu(x), 2)
    return x


@dataclass
class PrototypeSet:
    fg: Tensor  # [n_f, C]
    bg: Tensor  # [n_b, C]
    fg_cells: list[tuple[int, int]] | None
    bg_cells: list[tuple[int, int]] | None

    @property
    def fg_fallback(self) -> bool:
        return self.fg_cells is None

    @property
    def bg_fallback(self) -> bool:
        return self.bg_cells is None


def pooled_mask(mask, h: int, w: int) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != (h * FEATURE_STRIDE, w * FEATURE_STRIDE):
        raise DimensionError(f"mask {m.shape} does not match a {h}x{w} feature grid")
    return T.avg_pool_mask(m[None], FEATURE_STRIDE).data[0]


def _select(flat: Tensor, weights: np.ndarray, keep: np.ndarray, w: int):
    """Prototypes at admitted cells, or the masked average when none qualify."""
    cells = np.flatnonzero(keep)
    if cells.size:
        return T.take(flat, cells, axis=1).T, [(int(c // w), int(c % w)) for c in cells]
    wt = weights.reshape(-1).astype(flat.dtype)
    avg = T.matmul(flat, Tensor(wt)) * (1.0 / (float(wt.sum()) + 1e-5))
    return avg.reshape(1, -1), None


def extract_prototypes(feats: Tensor, mask, tau_fg: float = 0.5, tau_bg: float = 0.5) -> PrototypeSet:
    c, h, w = feats.shape
    fg_w = pooled_mask(mask, h, w)
    bg_w = pooled_mask(1.0 - np.asarray(mask, dtype=np.float64), h, w)
    flat = feats.reshape(c, h * w)
    fg, fg_cells = _select(flat, fg_w, fg_w > tau_fg, w)
    # cells where the complement is dominant: identical to fg_w < tau_bg for tau_bg = 0.5
    bg, bg_cells = _select(flat, bg_w, bg_w > 1.0 - tau_bg, w)
    return PrototypeSet(fg, bg, fg_cells, bg_cells)


def score_maps(query_feats: Tensor, protos: PrototypeSet) -> tuple[Tensor, Tensor]:
    return T.cosine_scores(query_feats, protos.fg), T.cosine_scores(query_feats, protos.bg)


def _blend(scores: Tensor, protos: Tensor, alpha: float) -> Tensor:
    n, h, w = scores.shape
    weights = T.softmax(scores * alpha, axis=0).reshape(n, h * w)
    return T.matmul(protos.T, weights).reshape(protos.shape[1], h, w)


def aggregate_prototypes(scores: tuple[Tensor, Tensor], protos: PrototypeSet,
                         alpha_w: float = 20.0) -> tuple[Tensor, Tensor]:
    """Per-location convex blends of the foreground and background prototypes."""
    fg_scores, bg_scores = scores
    if fg_scores.shape[0] != protos.fg.shape[0] or bg_scores.shape[0] != protos.bg.shape[0]:
        raise DimensionError("score maps do not match prototype counts")
    return _blend(fg_scores, protos.fg, alpha_w), _blend(bg_scores, protos.bg, alpha_w)


def predict(query_feats: Tensor, fg_hat: Tensor, bg_hat: Tensor, out_h: int, out_w: int,
            alpha_p: float = 20.0) -> Tensor:
    """Soft mask ``[2, out_h, out_w]``; channel 1 is the foreground probability."""
    h, w = query_feats.shape[1:]
    logits = T.concat([T.pixel_cosine(query_feats, bg_hat).reshape(1, h, w),
                       T.pixel_cosine(query_feats, fg_hat).reshape(1, h, w)], axis=0) * alpha_p
    return T.resize_bilinear(T.softmax(logits, axis=0), out_h, out_w)


def segment_features(support_feats: Tensor, support_mask, query_feats: Tensor, out_h: int, out_w: int,
                     cfg: ProtoConfig = ProtoConfig()) -> Tensor:
    protos = extract_prototypes(support_feats, support_mask, cfg.tau_fg, cfg.tau_bg)
    fg_hat, bg_hat = aggregate_prototypes(score_maps(query_feats, protos), protos, cfg.alpha_w)
    return predict(query_feats, fg_hat, bg_hat, out_h, out_w, cfg.alpha_p)


def segment(params: ModelParams, support_image, support_mask, query_image,
            cfg: ProtoConfig = ProtoConfig()) -> Tensor:
    s = np.asarray(support_image)
    q = np.asarray(query_image)
    if s.shape != q.shape or s.ndim != 2:
        raise DimensionError(f"support {s.shape} and query {q.shape} must be equal 2-D images")
    return segment_features(encode(params, s), support_mask, encode(params, q), *q.shape, cfg)
