"""Neural-network ops over the taped tensor core.

Feature maps are channels-first (C, H, W). Convolution uses cross-correlation
semantics (no kernel flip). Everything here is differentiable; direct ops
carry analytic backward rules, the rest compose the core primitives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _make,
    clip,
    sqrt,
    tmax,
    tmean,
)

__all__ = [
    "ConvSpec",
    "conv2d",
    "batch_norm",
    "layer_norm",
    "linear",
    "pixel_shuffle",
    "bilinear_upsample",
    "max_pool2d_same",
    "reduce",
    "conv_out_dim",
]


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_out_dim(size: int, kernel: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution; groups == in_channels means depthwise."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: tuple = (0, 0)
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "padding", _pair(self.padding))
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError(f"kernel extents must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1 or self.dilation < 1 or self.groups < 1:
            raise ShapeError("stride, dilation and groups must be >= 1")
        if min(self.padding) < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")

    def out_shape(self, h: int, w: int) -> tuple:
        ph, pw = self.padding
        ho = conv_out_dim(h, self.kernel_h, self.stride, ph, self.dilation)
        wo = conv_out_dim(w, self.kernel_w, self.stride, pw, self.dilation)
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"conv output collapses to {ho}x{wo} for input {h}x{w} with {self}")
        return ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None, *,
           stride=1, padding=0, dilation=1, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation of a (Cin,H,W) map with (Cout,Cin/g,kh,kw) kernels."""
    xd, wd = x.data, weight.data
    if xd.ndim != 3:
        raise ShapeError(f"conv2d expects a (C,H,W) input, got rank {xd.ndim}")
    if wd.ndim != 4:
        raise ShapeError(f"conv2d expects a (Cout,Cin/groups,kh,kw) weight, got rank {wd.ndim}")
    cin, h, w = xd.shape
    cout, cg, kh, kw = wd.shape
    if cin % groups != 0:
        raise ShapeError(f"input channels {cin} not divisible by groups {groups}")
    if cout % groups != 0:
        raise ShapeError(f"output channels {cout} not divisible by groups {groups}")
    if cg * groups != cin:
        raise ShapeError(
            f"weight expects {cg * groups} input channels (dim 1 x groups), input has {cin}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    ho = conv_out_dim(h, kh, sh, ph, dh)
    wo = conv_out_dim(w, kw, sw, pw, dw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output collapses to {ho}x{wo} for input {h}x{w}")

    xp = np.pad(xd, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd

    def window(u, v):
        return xp[:, u * dh: u * dh + sh * ho: sh, v * dw: v * dw + sw * wo: sw]

    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"bias shape {bias.data.shape} does not match {cout} output channels")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    co_g = cout // groups

    if groups == cin and cg == 1:
        # depthwise: accumulate kernel taps left-to-right so the result is
        # bit-identical to a nested-loop reference
        src = np.arange(cout) // co_g
        out = np.zeros((cout, ho, wo), dtype=xd.dtype)
        for u in range(kh):
            for v in range(kw):
                out += wd[:, 0, u, v, None, None] * window(u, v)[src]
        if bias is not None:
            out += bias.data[:, None, None]

        def bwd_dw(g):
            d_w = None
            if weight.requires_grad:
                d_w = np.empty_like(wd)
                for u in range(kh):
                    for v in range(kw):
                        d_w[:, 0, u, v] = (g * window(u, v)[src]).sum(axis=(1, 2))
            d_b = g.sum(axis=(1, 2)) if (bias is not None and bias.requires_grad) else None
            d_x = None
            if x.requires_grad:
                d_xp = np.zeros_like(xp)
                for u in range(kh):
                    for v in range(kw):
                        contrib = (g * wd[:, 0, u, v, None, None]) \
                            .reshape(cin, co_g, ho, wo).sum(axis=1)
                        d_xp[:, u * dh: u * dh + sh * ho: sh,
                             v * dw: v * dw + sw * wo: sw] += contrib
                d_x = d_xp[:, ph: ph + h, pw: pw + w] if (ph or pw) else d_xp
            if bias is None:
                return (d_x, d_w)
            return (d_x, d_w, d_b)

        return _make(out, inputs, bwd_dw)

    cols = np.empty((cin, kh, kw, ho, wo), dtype=xd.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = window(u, v)
    cols_g = cols.reshape(groups, cg * kh * kw, ho * wo)
    w_g = wd.reshape(groups, co_g, cg * kh * kw)
    out = (w_g @ cols_g).reshape(cout, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def bwd(g):
        g_g = g.reshape(groups, co_g, ho * wo)
        d_w = (g_g @ cols_g.transpose(0, 2, 1)).reshape(wd.shape) if weight.requires_grad else None
        d_b = g.sum(axis=(1, 2)) if (bias is not None and bias.requires_grad) else None
        d_x = None
        if x.requires_grad:
            d_cols = (w_g.transpose(0, 2, 1) @ g_g).reshape(cin, kh, kw, ho, wo)
            d_xp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    d_xp[:, u * dh: u * dh + sh * ho: sh,
                         v * dw: v * dw + sw * wo: sw] += d_cols[:, u, v]
            d_x = d_xp[:, ph: ph + h, pw: pw + w] if (ph or pw) else d_xp
        if bias is None:
            return (d_x, d_w)
        return (d_x, d_w, d_b)

    return _make(out, inputs, bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean=None,
               running_var=None, mode: str = "train", eps: float = 1e-5,
               momentum: float = 0.1) -> Tensor:
    """Per-channel normalization of a (C,H,W) (or (B,C,H,W)) map.

    Train mode normalizes by the statistics of the given tensor and folds them
    into the running buffers (plain arrays, mutated in place); eval mode
    normalizes by the running buffers. Train-mode output never depends on the
    buffers, so repeated train-mode calls stay pure in value.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    c_ax = x.ndim - 3
    c = x.shape[c_ax]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm parameters sized {gamma.shape}/{beta.shape} do not match {c} channels")
    pshape = (c, 1, 1) if x.ndim == 3 else (1, c, 1, 1)
    g = gamma.reshape(pshape)
    b = beta.reshape(pshape)
    axes = tuple(i for i in range(x.ndim) if i != c_ax)
    if mode == "train":
        mu = tmean(x, axis=axes, keepdims=True)
        xc = x - mu
        var = tmean(xc * xc, axis=axes, keepdims=True)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.data.reshape(c)
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var.data.reshape(c)
        return xc / sqrt(var + eps) * g + b
    if running_mean is None or running_var is None:
        raise ValueError("eval-mode batch_norm needs running statistics")
    rm = Tensor(np.asarray(running_mean, dtype=x.dtype).reshape(pshape))
    rv = Tensor(np.asarray(running_var, dtype=x.dtype).reshape(pshape))
    return (x - rm) / sqrt(rv + eps) * g + b


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tmean(xc * xc, axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * gamma + beta


def linear(x: Tensor, weight: Tensor, bias: Tensor = None) -> Tensor:
    """Affine map over the last axis: (...,D) @ (D,E) + (E,)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear input dim {x.shape[-1]} does not match weight rows {weight.shape[0]}")
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (C*r^2, H, W) -> (C, r*H, r*W); bijective on elements."""
    c2, h, w = x.shape
    if r < 1:
        raise ShapeError(f"pixel_shuffle factor must be >= 1, got {r}")
    if c2 % (r * r) != 0:
        raise ShapeError(f"channel count {c2} not divisible by r^2 = {r * r}")
    if r == 1:
        return x
    c = c2 // (r * r)
    y = x.reshape((c, r, r, h, w))
    y = y.transpose((0, 3, 1, 4, 2))
    return y.reshape((c, h * r, w * r))


_INTERP_CACHE: dict = {}


def _interp_matrix(n: int, f: int, dtype) -> np.ndarray:
    """Row-stochastic 1-D interpolation matrix (f*n, n), half-pixel centers."""
    key = (n, f, np.dtype(dtype).name)
    m = _INTERP_CACHE.get(key)
    if m is not None:
        return m
    m = np.zeros((f * n, n), dtype=dtype)
    for o in range(f * n):
        src = (o + 0.5) / f - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        lo = min(max(i0, 0), n - 1)
        hi = min(max(i0 + 1, 0), n - 1)
        m[o, lo] += 1.0 - t
        m[o, hi] += t
    _INTERP_CACHE[key] = m
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample (C,H,W) by an integer factor, half-pixel convention."""
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    xd = x.data
    _, h, w = xd.shape
    wh = _interp_matrix(h, factor, xd.dtype)
    ww = _interp_matrix(w, factor, xd.dtype)
    out = wh @ xd @ ww.T

    def bwd(g):
        return (wh.T @ g @ ww,)

    return _make(out, (x,), bwd)


def max_pool2d_same(x: Tensor, window: int) -> Tensor:
    """Stride-1 max pool with -inf padding; output shape equals input shape."""
    if window < 1 or window % 2 == 0:
        raise ShapeError(f"window must be odd and >= 1, got {window}")
    if window == 1:
        return x * 1.0 if x.requires_grad else x
    xd = x.data
    c, h, w = xd.shape
    p = (window - 1) // 2
    fill = -np.inf if np.issubdtype(xd.dtype, np.floating) else None
    xp = np.pad(xd, ((0, 0), (p, p), (p, p)), constant_values=fill)
    win = np.lib.stride_tricks.sliding_window_view(xp, (window, window), axis=(1, 2))
    flat = win.reshape(c, h, w, window * window)
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        rows = idx // window + np.arange(h)[None, :, None]
        colx = idx % window + np.arange(w)[None, None, :]
        d_xp = np.zeros_like(xp)
        cc = np.arange(c)[:, None, None]
        np.add.at(d_xp, (cc, rows, colx), g)
        return (d_xp[:, p: p + h, p: p + w],)

    return _make(np.ascontiguousarray(out), (x,), bwd)


def reduce(x: Tensor, kind: str) -> Tensor:
    """Spatial or channel reductions used by attention blocks.

    global_avg / global_max collapse H,W per channel -> (C,1,1);
    channel_avg / channel_max collapse C per pixel -> (1,H,W).
    Max gradients route to the first argmax in scan order.
    """
    c, h, w = x.shape
    if kind == "global_avg":
        return tmean(x, axis=(1, 2), keepdims=True)
    if kind == "global_max":
        return tmax(x.reshape((c, h * w)), axis=1, keepdims=True).reshape((c, 1, 1))
    if kind == "channel_avg":
        return tmean(x, axis=0, keepdims=True)
    if kind == "channel_max":
        return tmax(x, axis=0, keepdims=True)
    raise ValueError(f"unknown reduction kind {kind!r}")
