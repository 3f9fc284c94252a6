"""Heatmaps to detections: parametric local-maxima filter, top-K, box
reconstruction, class-aware greedy NMS, and the merged multi-kernel pipeline.

Everything here is pure numpy over frozen head outputs; ordering is
deterministic (score desc, then class, then y, then x).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Detection", "DecodeConfig", "local_peaks", "decode", "iou",
           "nms", "multi_kernel_decode", "write_detections", "read_detections"]


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple  # (x1, y1, x2, y2) in input pixels

    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return max(0.0, x2 - x1) * max(0.0, y2 - y1)


@dataclass(frozen=True)
class DecodeConfig:
    p: int = 1                       # local-max window is (2p+1)^2
    top_k: int = 1000
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    merge_ps: tuple = (0, 1, 10, 20)

    def __post_init__(self):
        if self.p < 0:
            raise ValueError("p must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not self.merge_ps:
            raise ValueError("merge_ps must be non-empty")

    def with_p(self, p: int) -> "DecodeConfig":
        return DecodeConfig(p=p, top_k=self.top_k,
                            score_threshold=self.score_threshold,
                            nms_iou=self.nms_iou, merge_ps=self.merge_ps)


def _pool_same(plane: np.ndarray, window: int) -> np.ndarray:
    pad = (window - 1) // 2
    padded = np.pad(plane, pad, constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(padded, (window, window))
    return win.max(axis=(2, 3))


def local_peaks(heatmap: np.ndarray, p: int) -> np.ndarray:
    """Cells equal to their (2p+1)-window max, as (class, y, x, score) rows.

    p=0 keeps every cell; ties with the pooled max are kept, so plateaus
    yield multiple peaks. Rows are sorted by (score desc, class, y, x).
    """
    if p < 0:
        raise ValueError("p must be >= 0")
    k, hm, wm = heatmap.shape
    if p == 0:
        mask = np.ones_like(heatmap, dtype=bool)
    else:
        window = 2 * p + 1
        mask = np.empty_like(heatmap, dtype=bool)
        for c in range(k):
            mask[c] = heatmap[c] >= _pool_same(heatmap[c], window)
    cls, ys, xs = np.nonzero(mask)
    scores = heatmap[cls, ys, xs]
    order = np.lexsort((xs, ys, cls, -scores))
    return np.column_stack([cls[order], ys[order], xs[order],
                            scores[order]]).astype(np.float64)


def decode(heatmap: np.ndarray, offset: np.ndarray, size: np.ndarray,
           cfg: DecodeConfig, stride: int) -> list:
    """Peaks -> global top-K -> boxes from offsets/sizes -> score filter."""
    peaks = local_peaks(np.asarray(heatmap), cfg.p)
    if len(peaks) > cfg.top_k:
        peaks = peaks[:cfg.top_k]
    dets = []
    for c, y, x, score in peaks:
        if score < cfg.score_threshold:
            continue
        c, y, x = int(c), int(y), int(x)
        cx = (x + float(offset[0, y, x])) * stride
        cy = (y + float(offset[1, y, x])) * stride
        w = float(size[0, y, x]) * stride
        h = float(size[1, y, x]) * stride
        dets.append(Detection(class_id=c, score=float(score),
                              box=(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)))
    return dets


def iou(a, b) -> float:
    """Intersection over union of two (x1,y1,x2,y2) boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def nms(dets: list, iou_thresh: float) -> list:
    """Greedy class-aware suppression, stable under (score, insertion) ties."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    alive = [True] * len(dets)
    kept = []
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        kept.append(dets[i])
        for j in order[pos + 1:]:
            if alive[j] and dets[j].class_id == dets[i].class_id \
                    and iou(dets[i].box, dets[j].box) >= iou_thresh:
                alive[j] = False
    return kept


def multi_kernel_decode(heatmap: np.ndarray, offset: np.ndarray, size: np.ndarray,
                        cfg: DecodeConfig, stride: int) -> list:
    """Union of per-p decodes (each with its own top-K), de-duplicated by
    exact (class, box) identity, then NMS."""
    merged = []
    seen = set()
    for p in cfg.merge_ps:
        for det in decode(heatmap, offset, size, cfg.with_p(p), stride):
            key = (det.class_id, det.box)
            if key not in seen:
                seen.add(key)
                merged.append(det)
    return nms(merged, cfg.nms_iou)


def write_detections(path, dets_by_image: dict) -> None:
    """One record per line: image_id, class, score (6dp), box corners (2dp)."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in sorted(dets_by_image):
            for d in dets_by_image[image_id]:
                x1, y1, x2, y2 = d.box
                fh.write(f"{image_id}\t{d.class_id}\t{d.score:.6f}"
                         f"\t{x1:.2f}\t{y1:.2f}\t{x2:.2f}\t{y2:.2f}\n")


def read_detections(path) -> dict:
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            image_id = parts[0]
            det = Detection(class_id=int(parts[1]), score=float(parts[2]),
                            box=tuple(float(v) for v in parts[3:7]))
            out.setdefault(image_id, []).append(det)
    return out
