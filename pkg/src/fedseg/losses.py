"""Training objective: weighted CE + cyclic consistency + spatial dice + edge dice."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .protoseg import ProtoConfig, segment
from .tensor import ModelParams, Tensor

DICE_EPS = 1e-5
LOG_CLAMP = 1e-8
EDGE_STAB = 1e-12

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass
class LossBreakdown:
    ce: float = 0.0
    cyclic: float = 0.0
    spatial_dice: float = 0.0
    edge_dice: float = 0.0
    total: float = 0.0
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    COMPONENTS = ("ce", "cyclic", "spatial_dice", "edge_dice", "total")

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.COMPONENTS}

    @classmethod
    def mean(cls, items: list["LossBreakdown"]) -> "LossBreakdown":
        if not items:
            return cls()
        return cls(**{k: float(np.mean([getattr(b, k) for b in items])) for k in cls.COMPONENTS})


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype.type if like is not None else T.get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def class_weights(gt: np.ndarray) -> tuple[float, float]:
    """Inverse-frequency (w_bg, w_fg); a one-class mask puts all weight on that class."""
    n_fg = float(np.count_nonzero(gt))
    n_bg = float(gt.size) - n_fg
    if n_fg == 0:
        return 1.0, 0.0
    if n_bg == 0:
        return 0.0, 1.0
    return n_fg / gt.size, n_bg / gt.size


def weighted_ce(pred: Tensor, gt) -> Tensor:
    gt = np.asarray(gt) > 0
    if pred.shape != (2,) + gt.shape:
        raise T.DimensionError(f"weighted_ce: prediction {pred.shape} vs mask {gt.shape}")
    w_bg, w_fg = class_weights(gt)
    weight = np.stack([np.where(gt, 0.0, w_bg), np.where(gt, w_fg, 0.0)]).astype(pred.dtype)
    logp = T.log(T.clamp(pred, lo=LOG_CLAMP))
    return (logp * weight).sum() * (-1.0 / gt.size)


def spatial_dice(p_true, p_pred, eps: float = DICE_EPS) -> Tensor:
    """``1 - 2 sum(t*p) / (sum t + sum p + eps)``."""
    p_pred = _as_tensor(p_pred)
    t = _as_tensor(p_true, p_pred)
    if t.shape != p_pred.shape:
        raise T.DimensionError(f"dice: {t.shape} vs {p_pred.shape}")
    inter = (t * p_pred).sum()
    return 1.0 - inter * 2.0 / (t.sum() + p_pred.sum() + eps)


def sobel_edge(mask) -> Tensor:
    """Gradient magnitude ``sqrt(Gx^2 + Gy^2 + 1e-12)`` of an ``H x W`` map."""
    m = _as_tensor(mask)
    if m.ndim != 2 or min(m.shape) < 3:
        raise T.DimensionError(f"sobel_edge needs an H x W map with H, W >= 3, got {m.shape}")
    kernel = Tensor(np.stack([SOBEL_X, SOBEL_Y])[:, None].astype(m.dtype))
    g = T.conv2d(m.reshape(1, *m.shape), kernel, stride=1, pad=1)
    return T.sqrt((g * g).sum(axis=0) + EDGE_STAB)


def edge_dice(e_true, e_pred, eps: float = DICE_EPS) -> Tensor:
    """Dice loss between edge maps, each saturated at 1 so the loss stays in [0, 1]."""
    e_pred = _as_tensor(e_pred)
    e_true = _as_tensor(e_true, e_pred)
    return spatial_dice(T.clamp(e_true, hi=1.0), T.clamp(e_pred, hi=1.0), eps)


def reverse_mask(pred_query: Tensor) -> np.ndarray:
    return (pred_query.data[1] > 0.5).astype(np.uint8)


def cyclic_loss(params: ModelParams, episode, pred_query: Tensor, cfg: ProtoConfig = ProtoConfig(),
                rev_mask: np.ndarray | None = None) -> Tensor:
    """Segment the support back from the query using the thresholded query prediction.

    The thresholded mask is a constant; gradients flow through the second pass
    only. An empty reverse mask contributes zero.
    """
    if rev_mask is None:
        rev_mask = reverse_mask(pred_query)
    if not rev_mask.any():
        return Tensor(np.zeros((), dtype=pred_query.dtype))
    back = segment(params, episode.query_image, rev_mask, episode.support_image, cfg)
    return weighted_ce(back, episode.support_mask)


def combine(ce: Tensor, cyclic: Tensor, pred: Tensor, gt, baseline: bool = False,
            dice_weights: tuple[float, float] = (1.0, 1.0)) -> LossBreakdown:
    """Assemble the objective from the CE terms and (unless baseline) the dice terms.

    Components are reported unweighted; with the default unit weights the
    total is their plain sum.
    """
    total = ce + cyclic
    sd = ed = 0.0
    if not baseline:
        fg = pred[1]
        sd_t = spatial_dice(gt, fg)
        ed_t = edge_dice(sobel_edge(np.asarray(gt, dtype=pred.dtype)), sobel_edge(fg))
        w_sd, w_ed = dice_weights
        total = total + (sd_t if w_sd == 1.0 else sd_t * w_sd) + (ed_t if w_ed == 1.0 else ed_t * w_ed)
        sd, ed = float(sd_t.data), float(ed_t.data)
    return LossBreakdown(
        ce=float(ce.data), cyclic=float(cyclic.data), spatial_dice=sd, edge_dice=ed,
        total=float(total.data), objective=total,
    )


def total_loss(params: ModelParams, episode, cfg: ProtoConfig = ProtoConfig(), baseline: bool = False,
               rev_mask: np.ndarray | None = None,
               dice_weights: tuple[float, float] = (1.0, 1.0)) -> LossBreakdown:
    """Run the episode forward and return every loss component plus the objective tensor."""
    pred = segment(params, episode.support_image, episode.support_mask, episode.query_image, cfg)
    ce = weighted_ce(pred, episode.query_gt_mask)
    cyc = cyclic_loss(params, episode, pred, cfg, rev_mask)
    return combine(ce, cyc, pred, episode.query_gt_mask, baseline, dice_weights)


__all__ = [
    "LossBreakdown", "weighted_ce", "spatial_dice", "sobel_edge", "edge_dice",
    "cyclic_loss", "total_loss", "combine", "class_weights", "reverse_mask",
]
