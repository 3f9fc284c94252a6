"""Command-line surface.

Subcommands: gen, train, eval, decode, ablate-fusion, ablate-kernel,
gradcheck. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from .decode import DecodeConfig, decode as decode_heads, multi_kernel_decode, nms, write_detections
from .gradcheck import run_block_suite
from .metrics import map_at, write_report
from .net import GlodConfig, MINI_CONFIG, load_model
from .synth import (SceneSpec, draw_boxes, load_image, make_dataset,
                    normalize, read_annotations, read_ppm, read_split, write_ppm)
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate, train

__all__ = ["main", "cli"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated int list, got {text!r}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="glod", description="desk-scale center-point detector")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="synthesize a dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--images", type=int, default=20)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--size", type=int, default=128)
    gen.add_argument("--objects-min", type=int, default=8)
    gen.add_argument("--objects-max", type=int, default=22)
    gen.add_argument("--roads-min", type=int, default=1)
    gen.add_argument("--roads-max", type=int, default=2)

    tr = sub.add_parser("train", help="train a detector")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--steps", type=int, default=2000)
    tr.add_argument("--lr", type=float, default=5e-5)
    tr.add_argument("--cycle-epochs", type=int, default=10)
    tr.add_argument("--micro-batch", type=int, default=2)
    tr.add_argument("--accum", type=int, default=4)
    tr.add_argument("--fusion", choices=("on", "off"), default="on")
    tr.add_argument("--config", choices=("desk", "mini"), default="desk")
    tr.add_argument("--weight-decay", type=float, default=0.01)
    tr.add_argument("--no-augment", action="store_true")
    tr.add_argument("--checkpoint-every", type=int, default=500)
    tr.add_argument("--resume")
    tr.add_argument("--dump-targets", metavar="DIR",
                    help="write first-step target tensors as GTEN files")

    ev = sub.add_parser("eval", help="detections + mAP/PSNR report")
    ev.add_argument("--data", required=True)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", choices=("train", "val"), default="val")
    ev.add_argument("--ps", type=_int_list, default=(0, 1, 10, 20))
    ev.add_argument("--score-thresh", type=float, default=0.05)

    de = sub.add_parser("decode", help="single image to detections + render")
    de.add_argument("--ckpt", required=True)
    de.add_argument("--image", required=True, help="binary PPM input")
    de.add_argument("--out", required=True)
    de.add_argument("--ps", type=_int_list, default=(0, 1, 10, 20))
    de.add_argument("--score-thresh", type=float, default=0.3)

    af = sub.add_parser("ablate-fusion", help="train with and without fusion")
    af.add_argument("--data", required=True)
    af.add_argument("--out", required=True)
    af.add_argument("--seed", type=int, default=0)
    af.add_argument("--steps", type=int, default=1000)
    af.add_argument("--lr", type=float, default=1e-3)
    af.add_argument("--cycle-epochs", type=int, default=0)
    af.add_argument("--micro-batch", type=int, default=1)
    af.add_argument("--accum", type=int, default=1)
    af.add_argument("--config", choices=("desk", "mini"), default="mini")
    af.add_argument("--score-thresh", type=float, default=0.05)

    ak = sub.add_parser("ablate-kernel", help="detection counts per kernel size p")
    ak.add_argument("--data", required=True)
    ak.add_argument("--ckpt", required=True)
    ak.add_argument("--out", required=True, help="CSV path")
    ak.add_argument("--ps", type=_int_list, default=(0, 1, 10, 20))
    ak.add_argument("--split", choices=("train", "val"), default="val")
    ak.add_argument("--score-thresh", type=float, default=0.05)
    ak.add_argument("--top-k", type=int, default=1000)

    gc = sub.add_parser("gradcheck", help="float64 finite-difference suite")
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--net-sample", type=int, default=2)
    gc.add_argument("--seed", type=int, default=0)

    return parser


def _model_config(name: str, image_size: int = None, fusion: bool = True) -> GlodConfig:
    base = GlodConfig() if name == "desk" else MINI_CONFIG
    kwargs = {"fusion": fusion}
    if image_size is not None:
        kwargs["image_size"] = image_size
    return replace(base, **kwargs)


def _cmd_gen(args) -> int:
    spec = SceneSpec(image_size=args.size, objects_min=args.objects_min,
                     objects_max=args.objects_max, roads_min=args.roads_min,
                     roads_max=args.roads_max)
    ids = make_dataset(args.out, args.images, args.seed, spec)
    print(f"wrote {len(ids)} scenes under {args.out}")
    return 0


def _cmd_train(args) -> int:
    model_cfg = _model_config(args.config, fusion=args.fusion == "on")
    cfg = TrainConfig(
        data_root=args.data, out_dir=args.out, model=model_cfg,
        steps=args.steps, lr=args.lr, cycle_epochs=args.cycle_epochs,
        micro_batch=args.micro_batch, accum=args.accum,
        weight_decay=args.weight_decay, seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        use_augment=not args.no_augment)
    if args.dump_targets:
        _dump_targets(cfg, args.dump_targets)
    path, rows = train(cfg, resume=args.resume)
    print(f"trained {len(rows)} steps -> {path}")
    if rows:
        print(f"final loss {rows[-1][2]:.6f}")
    return 0


def _dump_targets(cfg: TrainConfig, out_dir: str) -> None:
    from .serial import write_gten
    from .targets import encode_targets
    os.makedirs(out_dir, exist_ok=True)
    ann = read_annotations(cfg.data_root)
    ids = read_split(cfg.data_root)["train"][:cfg.effective_batch]
    for image_id in ids:
        t = encode_targets(ann.get(image_id, []), num_classes=cfg.model.num_classes,
                           map_size=cfg.model.map_size,
                           stride=cfg.model.output_stride, seed=cfg.seed)
        write_gten(os.path.join(out_dir, f"{image_id}.heatmap.gten"), t.heatmap)
        offmap = np.zeros((2,) + t.heatmap.shape[1:], np.float32)
        sizemap = np.zeros_like(offmap)
        offmap[:, t.center_ys, t.center_xs] = t.offsets
        sizemap[:, t.center_ys, t.center_xs] = t.sizes
        write_gten(os.path.join(out_dir, f"{image_id}.offset.gten"), offmap)
        write_gten(os.path.join(out_dir, f"{image_id}.size.gten"), sizemap)


def _cmd_eval(args) -> int:
    model, _, _ = load_model(args.ckpt)
    cfg = DecodeConfig(score_threshold=args.score_thresh, merge_ps=args.ps)
    os.makedirs(args.out, exist_ok=True)
    dets, result = evaluate(model, args.data, args.split, cfg)
    write_detections(os.path.join(args.out, "detections.tsv"), dets)
    write_report(os.path.join(args.out, "metrics.csv"), result)
    print(f"mAP50 {result.map50:.4f}  mAP75 {result.map75:.4f}")
    return 0


def _cmd_decode(args) -> int:
    model, _, _ = load_model(args.ckpt)
    model.eval()
    image = read_ppm(args.image)
    cfg = DecodeConfig(score_threshold=args.score_thresh, merge_ps=args.ps)
    with no_grad():
        head = model(Tensor(normalize(image)))
    dets = multi_kernel_decode(head.heatmap.data, head.offset.data,
                               head.size.data, cfg, model.config.output_stride)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    write_detections(os.path.join(args.out, f"{stem}.detections.tsv"), {stem: dets})
    write_ppm(os.path.join(args.out, f"{stem}.boxes.ppm"), draw_boxes(image, dets))
    print(f"{len(dets)} detections for {stem}")
    return 0


def _cmd_ablate_fusion(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    results = {}
    for fusion in (True, False):
        tag = "with_fb" if fusion else "without_fb"
        model_cfg = _model_config(args.config, fusion=fusion)
        cfg = TrainConfig(
            data_root=args.data, out_dir=os.path.join(args.out, tag),
            model=model_cfg, steps=args.steps, lr=args.lr,
            cycle_epochs=args.cycle_epochs, micro_batch=args.micro_batch,
            accum=args.accum, seed=args.seed, checkpoint_every=0,
            use_augment=False)
        path, _ = train(cfg)
        model, _, _ = load_model(path)
        _, result = evaluate(model, args.data, "val",
                             DecodeConfig(score_threshold=args.score_thresh))
        results[tag] = result
    report = os.path.join(args.out, "fusion_ablation.csv")
    with open(report, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "mAP50", "mAP75"])
        for tag, res in results.items():
            writer.writerow([tag, f"{res.map50:.6f}", f"{res.map75:.6f}"])
            print(f"{tag}: mAP50 {res.map50:.4f}  mAP75 {res.map75:.4f}")
    return 0


def _cmd_ablate_kernel(args) -> int:
    model, _, _ = load_model(args.ckpt)
    model.eval()
    ann = read_annotations(args.data)
    ids = read_split(args.data)[args.split]
    k = model.config.num_classes
    stride = model.config.output_stride
    rows = []
    heads = {}
    for image_id in ids:
        with no_grad():
            h = model(Tensor(normalize(load_image(args.data, image_id))))
        heads[image_id] = (h.heatmap.data, h.offset.data, h.size.data)
    for p in args.ps:
        cfg = DecodeConfig(p=p, top_k=args.top_k,
                           score_threshold=args.score_thresh)
        counts = [0] * k
        matched = 0
        total_gt = 0
        for image_id in ids:
            hm, off, size = heads[image_id]
            dets = nms(decode_heads(hm, off, size, cfg, stride), cfg.nms_iou)
            for d in dets:
                counts[d.class_id] += 1
            gts = [(o.class_id, o.box()) for o in ann.get(image_id, [])]
            total_gt += len(gts)
            matched += _count_matched(dets, gts)
        recall = matched / total_gt if total_gt else 0.0
        rows.append([p] + counts + [sum(counts), f"{recall:.6f}"])
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["p"] + [f"class_{c}" for c in range(k)] + ["total", "recall"])
        writer.writerows(rows)
    for row in rows:
        print("p=%s counts=%s recall=%s" % (row[0], row[1:-2], row[-1]))
    return 0


def _count_matched(dets, gts, tau: float = 0.5) -> int:
    from .decode import iou
    taken = [False] * len(gts)
    hits = 0
    for d in sorted(dets, key=lambda d: -d.score):
        best, best_j = 0.0, -1
        for j, (c, box) in enumerate(gts):
            if taken[j] or c != d.class_id:
                continue
            ov = iou(d.box, box)
            if ov > best:
                best, best_j = ov, j
        if best >= tau:
            taken[best_j] = True
            hits += 1
    return hits


def _cmd_gradcheck(args) -> int:
    results = run_block_suite(net_sample=args.net_sample, seed=args.seed)
    failed = False
    for name, err in results.items():
        status = "ok" if err < args.tol else "FAIL"
        print(f"{name:20s} max rel err {err:.3e}  {status}")
        failed |= err >= args.tol
    return 2 if failed else 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "decode": _cmd_decode,
    "ablate-fusion": _cmd_ablate_fusion,
    "ablate-kernel": _cmd_ablate_kernel,
    "gradcheck": _cmd_gradcheck,
}


def cli(argv) -> int:
    """Parse and run; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failure contract
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
