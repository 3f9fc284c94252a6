"""End-to-end detector assembly.

Encoder stages feed four cascaded UpConvMixers with U-Net-style skips: the
deepest UCM pairs stage-4 features with a learned pointwise projection of the
same features; each later UCM pairs the previous UCM output with the
same-resolution encoder stage. Each UCM doubles resolution, so the finest map
sits at stride patch_size/2, which the config exposes as the output stride.
When fusion is on, coarser UCM outputs are folded into the finest map by a
chain of x2 fusion blocks (effective factors 2/4/8). A three-branch
center-point head emits class heatmaps, sub-cell offsets, and sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import FusionBlock, UpConvMixer
from .encoder import Encoder, EncoderConfig
from .nn import Conv2d, Module, ModuleList
from .serial import load_checkpoint, save_checkpoint
from .tensor import ShapeError, Tensor, exp, gelu, sigmoid

__all__ = ["GlodConfig", "HeadOutput", "GLOD", "Head", "Neck",
           "build_model", "parameter_count", "save_model", "load_model",
           "DESK_ENCODER", "TOY_CONFIG", "MINI_CONFIG"]

# Desk-scale encoder for the detector: patch 8 so that four resolution-doubling
# UCMs land exactly at output stride 4; window 2 keeps 128px images divisible.
DESK_ENCODER = EncoderConfig(patch_size=8, window_size=2)


@dataclass(frozen=True)
class GlodConfig:
    image_size: int = 128
    num_classes: int = 5
    encoder: EncoderConfig = field(default_factory=lambda: DESK_ENCODER)
    ucm_widths: tuple = (128, 128, 64, 64)   # deepest UCM first
    ucm_steps: int = 3
    head_width: int = 64
    cbam_reduction: int = 8
    fusion: bool = True
    output_stride: int = 4
    heatmap_prior: float = 0.01

    def __post_init__(self):
        if len(self.ucm_widths) != 4:
            raise ShapeError("exactly four cascaded UCMs are required")
        if self.encoder.patch_size != 2 * self.output_stride:
            raise ShapeError(
                f"output stride {self.output_stride} needs encoder patch size "
                f"{2 * self.output_stride} (four x2 upsamplings from stride patch*8), "
                f"got {self.encoder.patch_size}")
        for w in self.ucm_widths:
            if w % 4 or w % self.cbam_reduction:
                raise ShapeError(
                    f"UCM width {w} must be divisible by 4 and by the CBAM "
                    f"reduction {self.cbam_reduction}")
        self.encoder.check_image(self.image_size, self.image_size)

    @property
    def map_size(self) -> int:
        return self.image_size // self.output_stride

    def to_header(self) -> dict:
        e = self.encoder
        return {
            "image_size": self.image_size,
            "num_classes": self.num_classes,
            "patch_size": e.patch_size,
            "window_size": e.window_size,
            "stage_depths": ",".join(map(str, e.stage_depths)),
            "stage_dims": ",".join(map(str, e.stage_dims)),
            "heads": ",".join(map(str, e.heads)),
            "mlp_ratio": e.mlp_ratio,
            "shifted": int(e.shifted),
            "ucm_widths": ",".join(map(str, self.ucm_widths)),
            "ucm_steps": self.ucm_steps,
            "head_width": self.head_width,
            "cbam_reduction": self.cbam_reduction,
            "fusion": int(self.fusion),
            "output_stride": self.output_stride,
            "heatmap_prior": self.heatmap_prior,
        }

    @staticmethod
    def from_header(header: dict) -> "GlodConfig":
        def ints(key):
            return tuple(int(v) for v in header[key].split(","))

        enc = EncoderConfig(
            patch_size=int(header["patch_size"]),
            window_size=int(header["window_size"]),
            stage_depths=ints("stage_depths"),
            stage_dims=ints("stage_dims"),
            heads=ints("heads"),
            mlp_ratio=int(header["mlp_ratio"]),
            shifted=bool(int(header["shifted"])),
        )
        return GlodConfig(
            image_size=int(header["image_size"]),
            num_classes=int(header["num_classes"]),
            encoder=enc,
            ucm_widths=ints("ucm_widths"),
            ucm_steps=int(header["ucm_steps"]),
            head_width=int(header["head_width"]),
            cbam_reduction=int(header["cbam_reduction"]),
            fusion=bool(int(header["fusion"])),
            output_stride=int(header["output_stride"]),
            heatmap_prior=float(header["heatmap_prior"]),
        )


# Small config for finite-difference suites and fast unit tests.
TOY_CONFIG = GlodConfig(
    image_size=32,
    num_classes=2,
    encoder=EncoderConfig(patch_size=2, window_size=2, stage_depths=(1, 1, 1, 1),
                          stage_dims=(4, 8, 16, 32), heads=(2, 2, 2, 2)),
    ucm_widths=(16, 16, 8, 8),
    ucm_steps=1,
    head_width=8,
    cbam_reduction=4,
    output_stride=1,
)

# Narrow 64px detector over all five synthetic classes; fast enough for
# repeated short training runs (ablation sweeps, loop tests).
MINI_CONFIG = GlodConfig(
    image_size=64,
    num_classes=5,
    encoder=EncoderConfig(patch_size=4, window_size=2, stage_depths=(1, 1, 1, 1),
                          stage_dims=(16, 32, 64, 128), heads=(2, 4, 4, 4)),
    ucm_widths=(64, 48, 32, 24),
    ucm_steps=2,
    head_width=24,
    cbam_reduction=8,
    output_stride=2,
)


@dataclass
class HeadOutput:
    heatmap: Tensor   # (K, Hm, Wm) in (0,1)
    offset: Tensor    # (2, Hm, Wm), raw sub-cell offsets
    size: Tensor      # (2, Hm, Wm), positive (exp of raw)


class Neck(Module):
    """Four cascaded UCMs plus the optional fusion chain."""

    def __init__(self, rng, config: GlodConfig):
        super().__init__()
        dims = config.encoder.stage_dims
        widths = config.ucm_widths
        self.project_deep = Conv2d(rng, dims[3], dims[3], 1)
        kw = dict(n_steps=config.ucm_steps, reduction=config.cbam_reduction)
        self.ucm4 = UpConvMixer(rng, dims[3], dims[3], widths[0], **kw)
        self.ucm3 = UpConvMixer(rng, self.ucm4.out_channels, dims[2], widths[1], **kw)
        self.ucm2 = UpConvMixer(rng, self.ucm3.out_channels, dims[1], widths[2], **kw)
        self.ucm1 = UpConvMixer(rng, self.ucm2.out_channels, dims[0], widths[3], **kw)
        self.out_channels = self.ucm1.out_channels
        self.fusion = config.fusion
        if config.fusion:
            self.fuse43 = FusionBlock(rng, self.ucm4.out_channels,
                                      self.ucm3.out_channels, 2)
            self.fuse32 = FusionBlock(rng, self.ucm3.out_channels,
                                      self.ucm2.out_channels, 2)
            self.fuse21 = FusionBlock(rng, self.ucm2.out_channels,
                                      self.ucm1.out_channels, 2)

    def forward(self, stages: list) -> Tensor:
        s1, s2, s3, s4 = stages
        u4 = self.ucm4(s4, self.project_deep(s4))
        u3 = self.ucm3(u4, s3)
        u2 = self.ucm2(u3, s2)
        u1 = self.ucm1(u2, s1)
        if not self.fusion:
            return u1
        merged = self.fuse43(u4, u3)
        merged = self.fuse32(merged, u2)
        return self.fuse21(merged, u1)


class Head(Module):
    """Three branches of 3x3 conv + GELU + pointwise.

    The heatmap branch bias starts at -ln((1-prior)/prior) so initial
    peak probabilities sit near the prior and the focal loss does not
    explode on the first steps.
    """

    def __init__(self, rng, in_ch: int, width: int, num_classes: int,
                 prior: float = 0.01):
        super().__init__()
        self.conv_cls = Conv2d(rng, in_ch, width, 3, padding=1)
        self.out_cls = Conv2d(rng, width, num_classes, 1)
        self.conv_off = Conv2d(rng, in_ch, width, 3, padding=1)
        self.out_off = Conv2d(rng, width, 2, 1)
        self.conv_size = Conv2d(rng, in_ch, width, 3, padding=1)
        self.out_size = Conv2d(rng, width, 2, 1)
        self.out_cls.bias.data[:] = -math.log((1.0 - prior) / prior)

    def forward(self, feat: Tensor) -> HeadOutput:
        heat = sigmoid(self.out_cls(gelu(self.conv_cls(feat))))
        off = self.out_off(gelu(self.conv_off(feat)))
        size = exp(self.out_size(gelu(self.conv_size(feat))))
        return HeadOutput(heatmap=heat, offset=off, size=size)


class GLOD(Module):
    """Encoder -> UCM cascade (-> fusion chain) -> center-point head."""

    def __init__(self, config: GlodConfig = GlodConfig(), seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.encoder = Encoder(rng, config.encoder)
        self.neck = Neck(rng, config)
        self.head = Head(rng, self.neck.out_channels, config.head_width,
                         config.num_classes, prior=config.heatmap_prior)

    def forward(self, image: Tensor) -> HeadOutput:
        return self.head(self.neck(self.encoder(image)))


def build_model(config: GlodConfig = GlodConfig(), seed: int = 0) -> GLOD:
    return GLOD(config, seed=seed)


def parameter_count(config: GlodConfig) -> int:
    """Exact learnable scalar count for a config (construction is seeded,
    so the count is stable across runs)."""
    return build_model(config, seed=0).parameter_count()


def save_model(path, model: GLOD, extra: dict | None = None,
               header_extra: dict | None = None) -> None:
    """Checkpoint parameters, buffers, and optional extra arrays (optimizer
    state) with the config embedded in the text header."""
    entries = dict(model.state_dict())
    for name, arr in (extra or {}).items():
        entries[name] = np.asarray(arr)
    header = model.config.to_header()
    header.update(header_extra or {})
    save_checkpoint(path, entries, header)


def load_model(path):
    """Rebuild a model from a checkpoint; returns (model, extra, header)."""
    entries, header = load_checkpoint(path)
    config = GlodConfig.from_header(header)
    model = build_model(config, seed=0)
    model_keys = {n for n, _ in model.named_parameters()}
    model_keys |= {n for n, _ in model.named_buffers()}
    state = {k: v for k, v in entries.items() if k in model_keys}
    extra = {k: v for k, v in entries.items() if k not in model_keys}
    model.load_state_dict(state)
    return model, extra, header
