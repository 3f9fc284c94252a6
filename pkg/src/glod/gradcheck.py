"""Finite-difference verification of taped gradients.

Contractual tolerances hold in float64 only; callers convert modules with
``Module.astype(np.float64)`` before checking.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Tape, Tensor, backward, no_grad

__all__ = ["finite_diff_check", "param_grad_errors"]


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      sample: Optional[int] = None, seed: int = 0) -> float:
    """Worst relative error between taped grad of f at x and central differences.

    f must be pure (value depends only on x). With `sample` set, only that
    many coordinates of x are probed (seeded choice); otherwise all of them.
    """
    was = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            loss = f(x)
        grads = backward(loss, tape)
    finally:
        x.requires_grad = was
    analytic = grads.get(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)
    coords = _coords(x.data.size, sample, seed)
    worst = 0.0
    aflat = analytic.reshape(-1)
    with no_grad():
        for i in coords:
            orig = x.data.flat[i]
            x.data.flat[i] = orig + h
            fp = f(x).item()
            x.data.flat[i] = orig - h
            fm = f(x).item()
            x.data.flat[i] = orig
            worst = max(worst, _rel_err(float(aflat[i]), (fp - fm) / (2.0 * h)))
    return worst


def param_grad_errors(loss_fn: Callable[[], Tensor],
                      params: Iterable[tuple],
                      h: float = 1e-5,
                      sample: Optional[int] = None,
                      seed: int = 0) -> dict:
    """Per-parameter worst relative FD error for a scalar loss closure.

    `loss_fn` is evaluated once under a tape for analytic gradients, then
    re-evaluated gradient-free around perturbed parameter coordinates.
    """
    params = list(params)
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape)
    rng = np.random.default_rng(seed)
    errors = {}
    with no_grad():
        for name, p in params:
            analytic = grads.get(p)
            if analytic is None:
                analytic = np.zeros_like(p.data)
            aflat = analytic.reshape(-1)
            worst = 0.0
            for i in _coords(p.data.size, sample, int(rng.integers(2**31))):
                orig = p.data.flat[i]
                p.data.flat[i] = orig + h
                fp = loss_fn().item()
                p.data.flat[i] = orig - h
                fm = loss_fn().item()
                p.data.flat[i] = orig
                worst = max(worst, _rel_err(float(aflat[i]), (fp - fm) / (2.0 * h)))
            errors[name] = worst
    return errors


def _coords(n: int, sample: Optional[int], seed: int):
    if sample is None or sample >= n:
        return range(n)
    rng = np.random.default_rng(seed)
    return rng.choice(n, size=sample, replace=False)


def run_block_suite(net_sample: int = 2, seed: int = 0) -> dict:
    """Float64 FD check of every composite block plus the toy end-to-end net.

    Returns {block name: worst relative error}. Full blocks check every
    parameter coordinate; the whole-net check samples `net_sample`
    coordinates per parameter tensor.
    """
    from . import blocks as B
    from .encoder import WindowAttention
    from .net import TOY_CONFIG, build_model

    rng = np.random.default_rng(seed)

    def probe_for(shape, scale=0.01):
        return Tensor(rng.standard_normal(shape) * scale)

    def check(module, forward, out_shape, sample=None):
        module.astype(np.float64)
        probe = probe_for(out_shape)
        errors = param_grad_errors(lambda: (forward() * probe).sum(),
                                   module.named_parameters(), sample=sample,
                                   seed=seed)
        return max(errors.values())

    def t64(shape):
        return Tensor(rng.standard_normal(shape))

    results = {}
    af = B.AsymmetricFusion(rng, 4, 8)
    x1, x2 = t64((2, 4, 4)), t64((2, 4, 4))
    results["asymmetric_fusion"] = check(af, lambda: af(x1, x2), (8, 4, 4))

    cbam = B.CBAM(rng, 8, reduction=4)
    xc = t64((8, 4, 4))
    results["cbam"] = check(cbam, lambda: cbam(xc), (8, 4, 4))

    hw = B.Highway(rng, 3)
    xh, hh = t64((3, 4, 4)), t64((3, 4, 4))
    results["highway"] = check(hw, lambda: hw(xh, hh), (3, 4, 4))

    ucm = B.UpConvMixer(rng, 4, 4, 8, n_steps=3, reduction=4)
    u1, u2 = t64((4, 4, 4)), t64((4, 4, 4))
    results["upconvmixer"] = check(ucm, lambda: ucm(u1, u2), (2, 8, 8))

    fb = B.FusionBlock(rng, 4, 3, 2)
    lo, hi = t64((4, 3, 3)), t64((3, 6, 6))
    results["fusion_block"] = check(fb, lambda: fb(lo, hi), (3, 6, 6))

    attn = WindowAttention(rng, 4, heads=2, window=2)
    xa = t64((4, 4, 4))
    results["window_attention"] = check(attn, lambda: attn(xa, shift=1), (4, 4, 4))

    model = build_model(TOY_CONFIG, seed=seed).astype(np.float64)
    img = t64((3, TOY_CONFIG.image_size, TOY_CONFIG.image_size))
    probes = {}

    def net_loss():
        out = model(img)
        for name, t in (("h", out.heatmap), ("o", out.offset), ("s", out.size)):
            if name not in probes:
                probes[name] = probe_for(t.shape)
        return ((out.heatmap * probes["h"]).sum()
                + (out.offset * probes["o"]).sum()
                + (out.size * probes["s"]).sum())

    errors = param_grad_errors(net_loss, model.named_parameters(),
                               sample=net_sample, seed=seed)
    results["glod_net_toy"] = max(errors.values())
    return results
