"""Hierarchical windowed-attention encoder.

Four stages of pre-norm attention blocks over non-overlapping windows,
alternating plain and cyclically shifted partitions, with patch merging
between stages. Emits one (C,H,W) map per stage at strides
patch_size * {1,2,4,8}; spatial dims halve and channels double stage to
stage. Internally tokens live channels-last as (Hs, Ws, C).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Conv2d, LayerNorm, Linear, Module, ModuleList, Parameter, trunc_normal
from .ops import linear as linear_op
from .tensor import ShapeError, Tensor, concat, gather_rows, gelu, narrow, roll, softmax_lastdim

__all__ = ["EncoderConfig", "Encoder", "PatchEmbed", "WindowAttention",
           "SwinBlock", "PatchMerge", "window_partition", "window_reverse"]


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 4
    window_size: int = 4
    stage_depths: tuple = (2, 2, 2, 2)
    stage_dims: tuple = (32, 64, 128, 256)
    heads: tuple = (2, 4, 4, 8)
    mlp_ratio: int = 2
    shifted: bool = True

    def __post_init__(self):
        if len(self.stage_depths) != 4 or len(self.stage_dims) != 4 or len(self.heads) != 4:
            raise ShapeError("encoder uses exactly four stages")
        for i in range(3):
            if self.stage_dims[i + 1] != 2 * self.stage_dims[i]:
                raise ShapeError(
                    f"stage dims must double (patch merge is 4C->2C); stage {i + 1} "
                    f"has {self.stage_dims[i + 1]} after {self.stage_dims[i]}")
        for dim, head in zip(self.stage_dims, self.heads):
            if dim % head != 0:
                raise ShapeError(f"heads {head} do not divide dim {dim}")

    @property
    def divisor(self) -> int:
        return self.patch_size * 8 * self.window_size

    def check_image(self, h: int, w: int) -> None:
        if h % self.divisor or w % self.divisor:
            raise ShapeError(
                f"image {h}x{w} not divisible by patch*8*window = {self.divisor}")

    def stage_strides(self) -> tuple:
        return tuple(self.patch_size * (1 << i) for i in range(4))


def window_partition(x: Tensor, window: int) -> Tensor:
    """(Hs,Ws,C) -> (num_windows, window^2, C); a bijection on tokens."""
    hs, ws, c = x.shape
    if hs % window or ws % window:
        raise ShapeError(f"token grid {hs}x{ws} not divisible by window {window}")
    x = x.reshape((hs // window, window, ws // window, window, c))
    x = x.transpose((0, 2, 1, 3, 4))
    return x.reshape(((hs // window) * (ws // window), window * window, c))


def window_reverse(x: Tensor, window: int, hs: int, ws: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    c = x.shape[-1]
    x = x.reshape((hs // window, ws // window, window, window, c))
    x = x.transpose((0, 2, 1, 3, 4))
    return x.reshape((hs, ws, c))


def relative_position_index(window: int) -> np.ndarray:
    """(N,N) lookup into the (2w-1)^2 relative-bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                  indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (window - 1)
    return (rel[:, :, 0] * (2 * window - 1) + rel[:, :, 1]).astype(np.intp)


_MASK_CACHE: dict = {}


def shift_attention_mask(hs: int, ws: int, window: int, shift: int, dtype=np.float32) -> np.ndarray:
    """Additive (num_windows, N, N) mask; -1e9 across wrapped-window seams."""
    key = (hs, ws, window, shift, np.dtype(dtype).name)
    cached = _MASK_CACHE.get(key)
    if cached is not None:
        return cached
    img = np.zeros((hs, ws), dtype=np.int64)
    tag = 0
    for hsl in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for wsl in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img[hsl, wsl] = tag
            tag += 1
    wins = img.reshape(hs // window, window, ws // window, window)
    wins = wins.transpose(0, 2, 1, 3).reshape(-1, window * window)
    mask = np.where(wins[:, :, None] == wins[:, None, :], 0.0, -1e9).astype(dtype)
    _MASK_CACHE[key] = mask
    return mask


class PatchEmbed(Module):
    """Non-overlapping p x p patches projected to the first stage width."""

    def __init__(self, rng, patch: int, dim: int, in_ch: int = 3):
        super().__init__()
        self.patch = patch
        self.proj = Conv2d(rng, in_ch, dim, patch, stride=patch)

    def forward(self, image: Tensor) -> Tensor:
        _, h, w = image.shape
        if h % self.patch or w % self.patch:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {self.patch}")
        x = self.proj(image)
        return x.transpose((1, 2, 0))


class WindowAttention(Module):
    """Multi-head self-attention inside each window with learned relative
    position bias; optional cyclic shift with seam masking."""

    def __init__(self, rng, dim: int, heads: int, window: int):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.window = window
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.to_q = Linear(rng, dim, dim)
        # a key bias shifts every attention row by a constant, which softmax
        # ignores; leave it out so every parameter stays live
        self.to_k = Linear(rng, dim, dim, bias=False)
        self.to_v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)
        self.bias_table = Parameter(
            trunc_normal(rng, ((2 * window - 1) ** 2, heads), std=0.02))
        self.rel_index = relative_position_index(window)

    def forward(self, x: Tensor, shift: int = 0, return_attn: bool = False):
        hs, ws, c = x.shape
        w = self.window
        if shift:
            x = roll(x, (-shift, -shift), (0, 1))
        tokens = window_partition(x, w)            # (nW, N, C)
        nw, n, _ = tokens.shape
        heads, hd = self.heads, self.head_dim

        def split(proj):
            return proj(tokens).reshape((nw, n, heads, hd)).transpose((0, 2, 1, 3))

        q, k, v = split(self.to_q), split(self.to_k), split(self.to_v)
        attn = (q * self.scale) @ k.transpose((0, 1, 3, 2))   # (nW, heads, N, N)

        bias = gather_rows(self.bias_table, self.rel_index.reshape(-1))
        bias = bias.reshape((n, n, heads)).transpose((2, 0, 1))
        attn = attn + bias
        if shift:
            mask = shift_attention_mask(hs, ws, w, shift, dtype=x.dtype)
            attn = attn + Tensor(mask[:, None, :, :])
        attn = softmax_lastdim(attn)

        out = attn @ v                                        # (nW, heads, N, hd)
        out = out.transpose((0, 2, 1, 3)).reshape((nw, n, c))
        out = self.proj(out)
        out = window_reverse(out, w, hs, ws)
        if shift:
            out = roll(out, (shift, shift), (0, 1))
        if return_attn:
            return out, attn
        return out


class SwinBlock(Module):
    """Pre-norm attention and MLP sublayers with residuals."""

    def __init__(self, rng, dim: int, heads: int, window: int, mlp_ratio: int, shift: int):
        super().__init__()
        self.shift = shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(rng, dim, heads, window)
        self.norm2 = LayerNorm(dim)
        self.mlp_in = Linear(rng, dim, dim * mlp_ratio)
        self.mlp_out = Linear(rng, dim * mlp_ratio, dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x), shift=self.shift)
        hidden = gelu(self.mlp_in(self.norm2(x)))
        return x + self.mlp_out(hidden)


class PatchMerge(Module):
    """Concat each 2x2 token neighborhood (4C) and project to 2C."""

    def __init__(self, rng, dim: int):
        super().__init__()
        self.reduction = Linear(rng, 4 * dim, 2 * dim)

    def forward(self, x: Tensor) -> Tensor:
        hs, ws, c = x.shape
        if hs % 2 or ws % 2:
            raise ShapeError(f"patch merge needs even token dims, got {hs}x{ws}")
        x = x.reshape((hs // 2, 2, ws // 2, 2, c))
        x = x.transpose((0, 2, 1, 3, 4))
        x = x.reshape((hs // 2, ws // 2, 4 * c))
        return self.reduction(x)


class Encoder(Module):
    """Four-stage hierarchy emitting multi-scale (C,H,W) feature maps."""

    def __init__(self, rng, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        self.patch_embed = PatchEmbed(rng, config.patch_size, config.stage_dims[0])
        stages = []
        merges = []
        for s in range(4):
            blocks = []
            for b in range(config.stage_depths[s]):
                shift = config.window_size // 2 if (config.shifted and b % 2 == 1) else 0
                blocks.append(SwinBlock(rng, config.stage_dims[s], config.heads[s],
                                        config.window_size, config.mlp_ratio, shift))
            stages.append(ModuleList(blocks))
            if s < 3:
                merges.append(PatchMerge(rng, config.stage_dims[s]))
        self.stages = ModuleList(stages)
        self.merges = ModuleList(merges)

    def forward(self, image: Tensor) -> list:
        self.config.check_image(image.shape[1], image.shape[2])
        x = self.patch_embed(image)
        outputs = []
        for s, blocks in enumerate(self.stages):
            for block in blocks:
                x = block(x)
            outputs.append(x.transpose((2, 0, 1)))
            if s < 3:
                x = self.merges[s](x)
        return outputs
