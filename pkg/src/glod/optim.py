"""AdamW with decoupled decay, and the cosine warm-restart schedule."""

from __future__ import annotations

import math

import numpy as np

from .nn import Module

__all__ = ["AdamW", "cosine_warm_restart_lr", "NonFiniteGradient"]


class NonFiniteGradient(RuntimeError):
    """Raised before any update when a gradient goes NaN/Inf; names the parameter."""


class AdamW:
    """Decoupled-weight-decay Adam over a module's named parameters.

    p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p, with
    bias-corrected first/second moments. Moment buffers live in the
    parameter dtype, so updates are bit-reproducible for a fixed op order.
    """

    def __init__(self, module: Module, lr: float = 5e-5, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(module.named_parameters())
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, grads: dict, lr: float = None) -> None:
        """One update from a {param Tensor: gradient array} map."""
        if lr is None:
            lr = self.lr
        for name, p in self.params:
            g = grads.get(p)
            if g is not None and not np.isfinite(g).all():
                raise NonFiniteGradient(f"non-finite gradient for {name}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params:
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update + lr * self.weight_decay * p.data).astype(p.data.dtype)

    def state_entries(self) -> dict:
        out = {"optim.step": np.asarray(float(self.step_count), dtype=np.float64)}
        for name in self.m:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_entries(self, entries: dict) -> None:
        self.step_count = int(entries["optim.step"])
        for name in self.m:
            self.m[name] = np.array(entries[f"optim.m.{name}"],
                                    dtype=self.m[name].dtype)
            self.v[name] = np.array(entries[f"optim.v.{name}"],
                                    dtype=self.v[name].dtype)


def cosine_warm_restart_lr(step: int, steps_per_cycle: int, lr_max: float,
                           lr_min: float = 0.0) -> float:
    """lr_min + (lr_max - lr_min)(1 + cos(pi t/T))/2 with t = step mod T."""
    if steps_per_cycle < 1:
        raise ValueError("steps_per_cycle must be >= 1")
    t = step % steps_per_cycle
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / steps_per_cycle))
