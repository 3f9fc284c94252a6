"""Training objective: penalty-reduced focal heatmap loss plus two
smooth-L1 regressions, summed with unit weights by default."""

from __future__ import annotations

import numpy as np

from .net import HeadOutput
from .targets import BACKGROUND_EPS, DetectionTargets
from .tensor import Tensor, clip, gather_pixels, log, tabs

__all__ = ["focal_loss", "smooth_l1", "total_loss"]

_CLAMP = 1e-7


def focal_loss(pred: Tensor, targets: DetectionTargets,
               alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Modified focal loss over per-class heatmaps.

    Peak cells (Y == 1) contribute (1-p)^alpha log p. The background term
    (1-Y)^beta p^alpha log(1-p) runs over the penalty-reduced ring
    (BACKGROUND_EPS <= Y < 1) plus the sampled pure-background cells.
    Normalized by the object count, or 1 when the image is empty.
    """
    y = targets.heatmap
    pos_mask = y >= 1.0
    ring_or_neg = ((y >= BACKGROUND_EPS) & ~pos_mask) | targets.neg_mask
    neg_weight = ((1.0 - y) ** beta * ring_or_neg).astype(y.dtype)

    p = clip(pred, _CLAMP, 1.0 - _CLAMP)
    pos_term = ((1.0 - p) ** alpha * log(p) * Tensor(pos_mask.astype(y.dtype))).sum()
    neg_term = (p ** alpha * log(1.0 - p) * Tensor(neg_weight)).sum()
    n = max(targets.num_objects, 1)
    return -(pos_term + neg_term) / float(n)


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Mean piecewise quadratic/linear penalty, C1 at |x - y| = beta."""
    if beta <= 0:
        raise ValueError("smooth_l1 beta must be positive")
    target = np.asarray(target)
    if target.size == 0:
        return Tensor(np.zeros((), dtype=np.float32))
    diff = pred - Tensor(target.astype(np.result_type(pred.dtype, np.float32)))
    adiff = tabs(diff)
    quad_mask = (adiff.data < beta)
    quad = (0.5 / beta) * (diff * diff)
    lin = adiff - 0.5 * beta
    elems = quad * Tensor(quad_mask.astype(diff.dtype)) \
        + lin * Tensor((~quad_mask).astype(diff.dtype))
    return elems.mean()


def total_loss(head: HeadOutput, targets: DetectionTargets,
               weights=(1.0, 1.0, 1.0), smooth_beta: float = 1.0):
    """Weighted sum of the three terms; returns (scalar, per-term floats)."""
    cls = focal_loss(head.heatmap, targets)
    if targets.num_objects:
        off_pred = gather_pixels(head.offset, targets.center_ys, targets.center_xs)
        size_pred = gather_pixels(head.size, targets.center_ys, targets.center_xs)
        off = smooth_l1(off_pred, targets.offsets, beta=smooth_beta)
        size = smooth_l1(size_pred, targets.sizes, beta=smooth_beta)
    else:
        off = Tensor(np.zeros((), dtype=np.float32))
        size = Tensor(np.zeros((), dtype=np.float32))
    w_cls, w_off, w_size = weights
    total = w_cls * cls + w_off * off + w_size * size
    breakdown = {"cls": cls.item(), "off": off.item(), "size": size.item(),
                 "total": total.item()}
    return total, breakdown
