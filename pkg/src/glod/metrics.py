"""Evaluation: per-class average precision at fixed IoU thresholds, and
heatmap PSNR as a spatial-fidelity proxy."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .decode import iou

__all__ = ["EvalResult", "average_precision", "map_at", "heatmap_psnr",
           "write_report"]

PSNR_CAP_DB = 100.0


@dataclass
class EvalResult:
    ap50: dict            # class_id -> AP at IoU 0.5
    ap75: dict            # class_id -> AP at IoU 0.75
    psnr: dict            # class_id -> dB
    gt_counts: dict
    det_counts: dict
    map50: float = 0.0
    map75: float = 0.0


def _match_greedy(dets, gt_boxes, tau):
    """Score-ordered greedy matching; each GT used at most once.

    dets: list of (score, box) for one image and class, any order.
    Returns tp flags aligned with score-sorted dets.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
    taken = [False] * len(gt_boxes)
    flags = []
    for i in order:
        _, box = dets[i]
        best, best_j = 0.0, -1
        for j, gt in enumerate(gt_boxes):
            if taken[j]:
                continue
            ov = iou(box, gt)
            if ov > best:
                best, best_j = ov, j
        if best >= tau and best_j >= 0:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    scores = [dets[i][0] for i in order]
    return scores, flags


def average_precision(dets_by_image: dict, gts_by_image: dict, tau: float) -> float:
    """All-point-interpolated AP for one class over a set of images.

    dets_by_image: image_id -> list of (score, box);
    gts_by_image:  image_id -> list of boxes. Raises on zero GT.
    """
    total_gt = sum(len(v) for v in gts_by_image.values())
    if total_gt == 0:
        raise ValueError("average precision undefined with zero ground truth")
    scored = []
    for image_id, dets in dets_by_image.items():
        gts = gts_by_image.get(image_id, [])
        scores, flags = _match_greedy(dets, gts, tau)
        scored.extend(zip(scores, flags))
    if not scored:
        return 0.0
    scored.sort(key=lambda t: -t[0])
    tps = np.cumsum([f for _, f in scored])
    fps = np.cumsum([not f for _, f in scored])
    recall = tps / total_gt
    precision = tps / np.maximum(tps + fps, 1)
    # monotone envelope, then sum rectangle areas at recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def map_at(dets_by_image: dict, gts_by_image: dict, tau: float):
    """Unweighted mean AP over classes that appear in the ground truth.

    dets_by_image: image_id -> list of Detection;
    gts_by_image:  image_id -> list of (class_id, box).
    Returns (mAP, {class_id: AP}).
    """
    classes = sorted({c for gts in gts_by_image.values() for c, _ in gts})
    if not classes:
        raise ValueError("no ground truth at all; mAP undefined")
    per_class = {}
    for c in classes:
        dets_c = {img: [(d.score, d.box) for d in dets if d.class_id == c]
                  for img, dets in dets_by_image.items()}
        gts_c = {img: [box for cc, box in gts if cc == c]
                 for img, gts in gts_by_image.items()}
        per_class[c] = average_precision(dets_c, gts_c, tau)
    return float(np.mean(list(per_class.values()))), per_class


def heatmap_psnr(pred: np.ndarray, gt: np.ndarray, max_val: float = 1.0) -> float:
    """10 log10(max^2 / MSE), capped at 100 dB for a zero-error pair."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"heatmap shapes differ: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(max_val * max_val / mse))


def write_report(path, result: EvalResult) -> None:
    """CSV: one row per class plus a summary row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "AP50", "AP75", "PSNR_dB",
                         "gt_count", "det_count"])
        for c in sorted(result.ap50):
            writer.writerow([c, f"{result.ap50[c]:.6f}", f"{result.ap75[c]:.6f}",
                             f"{result.psnr.get(c, float('nan')):.4f}",
                             result.gt_counts.get(c, 0), result.det_counts.get(c, 0)])
        writer.writerow(["summary", f"{result.map50:.6f}", f"{result.map75:.6f}",
                         f"{np.mean(list(result.psnr.values())):.4f}" if result.psnr else "nan",
                         sum(result.gt_counts.values()),
                         sum(result.det_counts.values())])
