"""Training loop with gradient accumulation, plus dataset evaluation.

Determinism contract: everything stochastic derives from (seed, step,
image_id) or (seed, epoch), never from mutable RNG state, so a resumed run
replays the original bit for bit and two runs with the same seed match.
"""

from __future__ import annotations

import csv
import math
import os
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .decode import DecodeConfig, multi_kernel_decode
from .losses import total_loss
from .metrics import EvalResult, heatmap_psnr, map_at
from .net import GLOD, GlodConfig, build_model, load_model, save_model
from .optim import AdamW, cosine_warm_restart_lr
from .synth import (AugmentationConfig, NormalizeConfig, augment, load_image,
                    normalize, read_annotations, read_split)
from .targets import encode_targets, sample_negatives
from .tensor import Tape, Tensor, backward, no_grad

__all__ = ["TrainConfig", "train", "evaluate", "TrainAbort"]


class TrainAbort(RuntimeError):
    """Loss or gradient went non-finite; the last good checkpoint survives."""


@dataclass(frozen=True)
class TrainConfig:
    data_root: str
    out_dir: str
    model: GlodConfig = field(default_factory=GlodConfig)
    steps: int = 2000
    lr: float = 5e-5
    lr_min: float = 0.0
    cycle_epochs: int = 10          # 0 disables the schedule
    micro_batch: int = 2
    accum: int = 4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 500
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    use_augment: bool = True
    neg_ratio: float = 0.02
    loss_weights: tuple = (1.0, 1.0, 1.0)
    dtype: str = "float32"          # float64 for verification runs

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accum


def _image_seed(seed: int, image_id: str, step: int, salt: int) -> int:
    return (seed * 0x9E3779B1 + zlib.crc32(image_id.encode()) * 31
            + step * 0x85EBCA6B + salt) % (2**31)


def _epoch_order(ids, seed: int, epoch: int):
    rng = np.random.default_rng((seed << 20) ^ (epoch * 2654435761 % 2**31))
    return [ids[i] for i in rng.permutation(len(ids))]


class _Stream:
    """Deterministic image-id stream: reshuffled each epoch, addressable by
    global slot index so resumed runs replay identically."""

    def __init__(self, ids, seed):
        self.ids = list(ids)
        self.seed = seed
        self._epoch = -1
        self._order = []

    def at(self, slot: int) -> str:
        epoch, pos = divmod(slot, len(self.ids))
        if epoch != self._epoch:
            self._order = _epoch_order(self.ids, self.seed, epoch)
            self._epoch = epoch
        return self._order[pos]


def train(config: TrainConfig, resume: str = None):
    """Run the loop; returns (checkpoint path, metrics rows).

    Writes {out}/model.gckpt on cadence and at the end, and {out}/train_log.csv
    with one row per step: step, lr, loss_total, loss_cls, loss_off, loss_size.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    ann = read_annotations(config.data_root)
    split = read_split(config.data_root)
    train_ids = split["train"] or sorted(ann)
    if not train_ids:
        raise FileNotFoundError(f"no training images under {config.data_root}")
    images = {i: load_image(config.data_root, i) for i in train_ids}

    if resume:
        model, extra, _ = load_model(resume)
        optim = AdamW(model, lr=config.lr, betas=config.betas, eps=config.eps,
                      weight_decay=config.weight_decay)
        optim.load_state_entries(extra)
        start_step = optim.step_count
    else:
        model = build_model(config.model, seed=config.seed)
        optim = AdamW(model, lr=config.lr, betas=config.betas, eps=config.eps,
                      weight_decay=config.weight_decay)
        start_step = 0
    if config.dtype == "float64":
        model.astype(np.float64)
        optim = AdamW(model, lr=config.lr, betas=config.betas, eps=config.eps,
                      weight_decay=config.weight_decay)
    model.train()

    epoch_len = max(1, math.ceil(len(train_ids) / config.effective_batch))
    steps_per_cycle = max(1, config.cycle_epochs * epoch_len)
    stream = _Stream(train_ids, config.seed)
    ckpt_path = os.path.join(config.out_dir, "model.gckpt")
    log_path = os.path.join(config.out_dir, "train_log.csv")
    rows = []
    stride = config.model.output_stride
    map_size = config.model.map_size
    k = config.model.num_classes

    def save(step):
        save_model(ckpt_path, model, extra=optim.state_entries(),
                   header_extra={"train_step": step, "train_seed": config.seed})

    log_mode = "a" if resume else "w"
    with open(log_path, log_mode, newline="", encoding="utf-8") as log_fh:
        writer = csv.writer(log_fh)
        if not resume:
            writer.writerow(["step", "lr", "loss_total", "loss_cls",
                             "loss_off", "loss_size"])
        for step in range(start_step, config.steps):
            lr = config.lr if config.cycle_epochs == 0 else cosine_warm_restart_lr(
                step, steps_per_cycle, config.lr, config.lr_min)
            accum_grads: dict = {}
            terms = {"total": 0.0, "cls": 0.0, "off": 0.0, "size": 0.0}
            n_images = config.effective_batch
            for micro in range(n_images):
                image_id = stream.at(step * n_images + micro)
                image = images[image_id]
                objects = ann.get(image_id, [])
                if config.use_augment:
                    image, objects = augment(
                        image, objects, config.augment,
                        seed=_image_seed(config.seed, image_id, step, 17))
                targets = encode_targets(
                    objects, num_classes=k, map_size=map_size, stride=stride,
                    seed=_image_seed(config.seed, image_id, step, 71),
                    neg_ratio=config.neg_ratio)
                inp = Tensor(normalize(image))
                with Tape() as tape:
                    head = model(inp)
                    loss, parts = total_loss(head, targets,
                                             weights=config.loss_weights)
                if not np.isfinite(loss.data):
                    save_step = step  # keep whatever was last written
                    raise TrainAbort(
                        f"non-finite loss at step {step} on {image_id}; "
                        f"last checkpoint at step <= {save_step}")
                grads = backward(loss, tape)
                inv = 1.0 / n_images
                for p, g in grads.items():
                    acc = accum_grads.get(p)
                    accum_grads[p] = g * inv if acc is None else acc + g * inv
                for key in terms:
                    terms[key] += parts[key] / n_images
            optim.step(accum_grads, lr=lr)
            rows.append([step, lr, terms["total"], terms["cls"],
                         terms["off"], terms["size"]])
            writer.writerow([step, f"{lr:.10g}", f"{terms['total']:.8f}",
                             f"{terms['cls']:.8f}", f"{terms['off']:.8f}",
                             f"{terms['size']:.8f}"])
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save(step + 1)
        save(config.steps)
    return ckpt_path, rows


def evaluate(model: GLOD, data_root: str, split_name: str = "val",
             decode_cfg: DecodeConfig = DecodeConfig(),
             image_ids=None) -> tuple:
    """Detections plus mAP50/75 and per-class heatmap PSNR for a split."""
    model.eval()
    ann = read_annotations(data_root)
    if image_ids is None:
        image_ids = read_split(data_root)[split_name]
    stride = model.config.output_stride
    k = model.config.num_classes
    dets_by_image = {}
    gts_by_image = {}
    sq_err = np.zeros(k)
    px_count = np.zeros(k)
    gt_counts = {c: 0 for c in range(k)}
    det_counts = {c: 0 for c in range(k)}
    for image_id in image_ids:
        image = load_image(data_root, image_id)
        objects = ann.get(image_id, [])
        with no_grad():
            head = model(Tensor(normalize(image)))
        dets = multi_kernel_decode(head.heatmap.data, head.offset.data,
                                   head.size.data, decode_cfg, stride)
        dets_by_image[image_id] = dets
        gts_by_image[image_id] = [(o.class_id, o.box()) for o in objects]
        targets = encode_targets(objects, num_classes=k,
                                 map_size=model.config.map_size, stride=stride)
        diff = (head.heatmap.data.astype(np.float64) - targets.heatmap) ** 2
        sq_err += diff.sum(axis=(1, 2))
        px_count += diff.shape[1] * diff.shape[2]
        for o in objects:
            gt_counts[o.class_id] += 1
        for d in dets:
            det_counts[d.class_id] += 1

    map50, ap50 = map_at(dets_by_image, gts_by_image, 0.5)
    map75, ap75 = map_at(dets_by_image, gts_by_image, 0.75)
    psnr = {}
    for c in range(k):
        if px_count[c]:
            mse = sq_err[c] / px_count[c]
            psnr[c] = 100.0 if mse == 0 else min(100.0, 10.0 * np.log10(1.0 / mse))
    result = EvalResult(ap50=ap50, ap75=ap75, psnr=psnr, gt_counts=gt_counts,
                        det_counts=det_counts, map50=map50, map75=map75)
    return dets_by_image, result
