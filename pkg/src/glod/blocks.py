"""Composite neck blocks: asymmetric fusion, CBAM, highway gating,
separable mixer steps, the UpConvMixer, and the two-resolution fusion block.

All blocks are pure parameterized maps over (C,H,W) feature tensors and are
safe to evaluate concurrently on distinct inputs.
"""

from __future__ import annotations

import numpy as np

from .nn import BatchNorm, Conv2d, Module, ModuleList
from .ops import bilinear_upsample, pixel_shuffle, reduce
from .tensor import ShapeError, Tensor, concat, gelu, relu, sigmoid

__all__ = ["AsymmetricFusion", "CBAM", "Highway", "MixerStep",
           "UpConvMixer", "FusionBlock"]


class AsymmetricFusion(Module):
    """Concat two maps, run 1x3 / 3x3 / 3x1 conv+BN branches, sum, ReLU.

    Paddings (0,1) / (1,1) / (1,0) keep all branch outputs at the input
    spatial size, so the output is non-negative and spatially unchanged.
    """

    def __init__(self, rng, in_ch: int, out_ch: int):
        super().__init__()
        self.conv_1x3 = Conv2d(rng, in_ch, out_ch, (1, 3), padding=(0, 1), bias=False)
        self.conv_3x3 = Conv2d(rng, in_ch, out_ch, (3, 3), padding=(1, 1), bias=False)
        self.conv_3x1 = Conv2d(rng, in_ch, out_ch, (3, 1), padding=(1, 0), bias=False)
        self.bn_1x3 = BatchNorm(out_ch)
        self.bn_3x3 = BatchNorm(out_ch)
        self.bn_3x1 = BatchNorm(out_ch)

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        if x1.shape[1:] != x2.shape[1:]:
            raise ShapeError(
                f"asymmetric fusion inputs differ spatially: {x1.shape[1:]} vs {x2.shape[1:]}")
        x = concat([x1, x2], axis=0)
        s = self.bn_1x3(self.conv_1x3(x)) \
            + self.bn_3x3(self.conv_3x3(x)) \
            + self.bn_3x1(self.conv_3x1(x))
        return relu(s)


class CBAM(Module):
    """Channel then spatial attention, both multiplicative masks in (0,1)."""

    def __init__(self, rng, channels: int, reduction: int = 8, spatial_kernel: int = 7):
        super().__init__()
        if channels % reduction != 0:
            raise ShapeError(
                f"CBAM reduction {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        self.fc1 = Conv2d(rng, channels, hidden, 1, bias=False)
        self.fc2 = Conv2d(rng, hidden, channels, 1, bias=False)
        self.spatial = Conv2d(rng, 2, 1, spatial_kernel,
                              padding=(spatial_kernel - 1) // 2, bias=False)

    def channel_mask(self, x: Tensor) -> Tensor:
        avg = self.fc2(relu(self.fc1(reduce(x, "global_avg"))))
        mx = self.fc2(relu(self.fc1(reduce(x, "global_max"))))
        return sigmoid(avg + mx)

    def spatial_mask(self, x: Tensor) -> Tensor:
        pooled = concat([reduce(x, "channel_avg"), reduce(x, "channel_max")], axis=0)
        return sigmoid(self.spatial(pooled))

    def forward(self, x: Tensor) -> Tensor:
        x = x * self.channel_mask(x)
        return x * self.spatial_mask(x)


class Highway(Module):
    """Gated convex combination g*h + (1-g)*x, gate computed from x."""

    def __init__(self, rng, channels: int):
        super().__init__()
        self.gate = Conv2d(rng, channels, channels, 1)

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape != h.shape:
            raise ShapeError(f"highway inputs differ: {x.shape} vs {h.shape}")
        g = sigmoid(self.gate(x))
        return g * h + (1.0 - g) * x


class MixerStep(Module):
    """One separable refinement: depthwise atrous conv and pointwise mix,
    each BN+GELU, merged with the carried state through a highway gate."""

    def __init__(self, rng, channels: int, dilation: int = 2):
        super().__init__()
        self.depthwise = Conv2d(rng, channels, channels, 3, padding=dilation,
                                dilation=dilation, groups=channels, bias=False)
        self.bn_dw = BatchNorm(channels)
        self.pointwise = Conv2d(rng, channels, channels, 1, bias=False)
        self.bn_pw = BatchNorm(channels)
        self.highway = Highway(rng, channels)

    def forward(self, state: Tensor) -> Tensor:
        mixed = gelu(self.bn_dw(self.depthwise(state)))
        mixed = gelu(self.bn_pw(self.pointwise(mixed)))
        return self.highway(state, mixed)


class UpConvMixer(Module):
    """Asymmetric fusion, N highway-gated mixer steps, CBAM, PixelShuffle x2.

    Output has a quarter of the internal channels at twice the resolution.
    `cbam_per_step` moves the attention inside each repeat instead of once
    at the block end (kept constructible for ablations).
    """

    def __init__(self, rng, in1_ch: int, in2_ch: int, width: int, n_steps: int = 3,
                 reduction: int = 8, dilation: int = 2, cbam_per_step: bool = False):
        super().__init__()
        if width % 4 != 0:
            raise ShapeError(f"UCM width {width} must be divisible by 4 for the shuffle")
        if n_steps < 1:
            raise ShapeError("UCM needs at least one mixer step")
        self.fuse = AsymmetricFusion(rng, in1_ch + in2_ch, width)
        self.steps = ModuleList(MixerStep(rng, width, dilation=dilation)
                                for _ in range(n_steps))
        self.cbam = CBAM(rng, width, reduction=reduction)
        self.cbam_per_step = cbam_per_step
        self.out_channels = width // 4

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        state = self.fuse(x1, x2)
        for step in self.steps:
            state = step(state)
            if self.cbam_per_step:
                state = self.cbam(state)
        if not self.cbam_per_step:
            state = self.cbam(state)
        return pixel_shuffle(state, 2)


class FusionBlock(Module):
    """GELU( pointwise(high) + bilinear_up_f(pointwise(low)) )."""

    def __init__(self, rng, low_ch: int, high_ch: int, factor: int):
        super().__init__()
        if factor < 2:
            raise ShapeError(f"fusion factor must be >= 2, got {factor}")
        self.project_low = Conv2d(rng, low_ch, high_ch, 1)
        self.project_high = Conv2d(rng, high_ch, high_ch, 1)
        self.factor = factor

    def forward(self, low: Tensor, high: Tensor) -> Tensor:
        f = self.factor
        if (low.shape[1] * f, low.shape[2] * f) != (high.shape[1], high.shape[2]):
            raise ShapeError(
                f"fusion expects high = {f}x low resolution, got "
                f"{low.shape[1:]} vs {high.shape[1:]}")
        return gelu(self.project_high(high) + bilinear_upsample(self.project_low(low), f))
