"""Ground-truth encoding for center-point detection.

Each object becomes a 2-D Gaussian peak of height 1 on its class plane
(pointwise max across objects), a sub-cell offset in [0,1)^2 and a size in
feature-map units at its center cell. The background term of the focal loss
is evaluated on a per-step resample of pure-background cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["GroundTruthObject", "DetectionTargets", "gaussian_radius",
           "encode_targets", "sample_negatives", "BACKGROUND_EPS"]

# heatmap values below this count as pure background for negative sampling
BACKGROUND_EPS = 1e-4


@dataclass(frozen=True)
class GroundTruthObject:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def box(self) -> tuple:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass
class DetectionTargets:
    heatmap: np.ndarray        # (K, Hm, Wm) float32 in [0, 1]
    center_ys: np.ndarray      # (M,) int
    center_xs: np.ndarray      # (M,) int
    offsets: np.ndarray        # (2, M) float32 in [0, 1)
    sizes: np.ndarray          # (2, M) float32, feature units
    classes: np.ndarray        # (M,) int
    neg_mask: np.ndarray       # (K, Hm, Wm) bool, sampled pure background
    num_objects: int

    @property
    def center_mask(self) -> np.ndarray:
        mask = np.zeros(self.heatmap.shape[1:], dtype=bool)
        mask[self.center_ys, self.center_xs] = True
        return mask


def gaussian_radius(w_feat: float, h_feat: float, min_overlap: float = 0.7) -> float:
    """Largest center displacement keeping IoU >= min_overlap, floored at 1.

    Smallest positive root over the three corner-perturbation cases
    (shifted box, both corners inward, both corners outward).
    """
    w, h = float(w_feat), float(h_feat)
    if w <= 0 or h <= 0:
        raise ValueError(f"object extents must be positive, got {w}x{h}")
    o = min_overlap

    b1 = h + w
    c1 = w * h * (1 - o) / (1 + o)
    r1 = (b1 - np.sqrt(b1 * b1 - 4 * c1)) / 2

    b2 = 2 * (h + w)
    c2 = (1 - o) * w * h
    r2 = (b2 - np.sqrt(b2 * b2 - 16 * c2)) / 8

    b3 = 2 * o * (h + w)
    c3 = (o - 1) * w * h
    r3 = (-b3 + np.sqrt(b3 * b3 - 16 * o * c3)) / (8 * o)

    return float(max(1.0, min(r1, r2, r3)))


def _render_gaussian(plane: np.ndarray, cx_cell: int, cy_cell: int, sigma: float) -> None:
    hm, wm = plane.shape
    ys = np.arange(hm, dtype=np.float64)[:, None] - cy_cell
    xs = np.arange(wm, dtype=np.float64)[None, :] - cx_cell
    g = np.exp(-(xs * xs + ys * ys) / (2.0 * sigma * sigma))
    np.maximum(plane, g.astype(plane.dtype), out=plane)


def encode_targets(objects, *, num_classes: int, map_size: int, stride: int,
                   seed: int = 0, neg_ratio: float = 0.02) -> DetectionTargets:
    """Render per-class Gaussian heatmaps and per-center regression targets."""
    k, hm = num_classes, map_size
    heat = np.zeros((k, hm, hm), dtype=np.float32)
    ys, xs, offs, sizes, classes = [], [], [], [], []
    for obj in objects:
        if not (0 <= obj.cx < hm * stride and 0 <= obj.cy < hm * stride):
            raise ValueError(
                f"object center ({obj.cx}, {obj.cy}) outside the {hm * stride}px image")
        if not (0 <= obj.class_id < k):
            raise ValueError(f"class id {obj.class_id} outside [0, {k})")
        fx, fy = obj.cx / stride, obj.cy / stride
        cx_cell, cy_cell = int(np.floor(fx)), int(np.floor(fy))
        w_feat, h_feat = obj.w / stride, obj.h / stride
        radius = gaussian_radius(w_feat, h_feat)
        _render_gaussian(heat[obj.class_id], cx_cell, cy_cell, radius / 3.0)
        ys.append(cy_cell)
        xs.append(cx_cell)
        offs.append((fx - cx_cell, fy - cy_cell))
        sizes.append((w_feat, h_feat))
        classes.append(obj.class_id)
    targets = DetectionTargets(
        heatmap=heat,
        center_ys=np.asarray(ys, dtype=np.intp),
        center_xs=np.asarray(xs, dtype=np.intp),
        offsets=np.asarray(offs, dtype=np.float32).reshape(-1, 2).T.copy(),
        sizes=np.asarray(sizes, dtype=np.float32).reshape(-1, 2).T.copy(),
        classes=np.asarray(classes, dtype=np.intp),
        neg_mask=np.zeros_like(heat, dtype=bool),
        num_objects=len(classes),
    )
    targets.neg_mask = sample_negatives(heat, seed=seed, ratio=neg_ratio)
    return targets


def sample_negatives(heatmap: np.ndarray, seed: int, ratio: float = 0.02) -> np.ndarray:
    """Uniform sample of round(ratio * #pure-background cells), disjoint from
    peaks and the penalty-reduced ring by construction."""
    rng = np.random.default_rng(seed)
    flat_bg = np.flatnonzero(heatmap.reshape(-1) < BACKGROUND_EPS)
    take = int(round(ratio * flat_bg.size))
    mask = np.zeros(heatmap.size, dtype=bool)
    if take:
        mask[rng.choice(flat_bg, size=take, replace=False)] = True
    return mask.reshape(heatmap.shape)
