"""Parameter containers and the basic trainable layers.

A Module tracks Parameters, child Modules and plain-array buffers through
attribute assignment; checkpointing flattens them to dotted names. All random
initialization draws from an explicit numpy Generator so model construction
is reproducible from a single seed.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor

__all__ = ["Parameter", "Module", "ModuleList", "Conv2d", "Linear",
           "BatchNorm", "LayerNorm", "trunc_normal"]


class Parameter(Tensor):
    """A leaf tensor that receives gradients."""

    def __init__(self, data, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)


class Module:
    """Base class with parameter/buffer registration and train/eval state."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = ""):
        for n, p in self._parameters.items():
            yield prefix + n, p
        for n, m in self._modules.items():
            yield from m.named_parameters(prefix + n + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for n, b in self._buffers.items():
            yield prefix + n, b
        for n, m in self._modules.items():
            yield from m.named_buffers(prefix + n + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self):
        for m in self.modules():
            object.__setattr__(m, "training", True)
        return self

    def eval(self):
        for m in self.modules():
            object.__setattr__(m, "training", False)
        return self

    def astype(self, dtype):
        """Convert parameters in place, preserving tensor identity."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict:
        state = {n: p.data for n, p in self.named_parameters()}
        state.update({n: b for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.data.shape != value.shape:
                    raise ValueError(
                        f"shape mismatch for {name}: have {p.data.shape}, loading {value.shape}")
                p.data = np.array(value, dtype=p.data.dtype)
            elif name in buffers:
                buffers[name][...] = value
            else:
                raise KeyError(f"unknown entry in state dict: {name}")
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state dict missing entries: {sorted(missing)}")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """Sequence of child modules registered by index."""

    def __init__(self, children=()):
        super().__init__()
        self._items = []
        for child in children:
            self.append(child)

    def append(self, child: Module):
        setattr(self, str(len(self._items)), child)
        self._items.append(child)
        return self

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draw truncated to two standard deviations."""
    x = rng.standard_normal(shape) * std
    return np.clip(x, -2.0 * std, 2.0 * std).astype(np.float32)


class Conv2d(Module):
    """2-D cross-correlation layer; He-normal weights, zero bias."""

    def __init__(self, rng, in_ch: int, out_ch: int, kernel, stride=1,
                 padding=0, dilation=1, groups=1, bias=True):
        super().__init__()
        kh, kw = kernel if isinstance(kernel, (tuple, list)) else (kernel, kernel)
        self.spec = ops.ConvSpec(kh, kw, stride=stride, padding=padding,
                                 dilation=dilation, groups=groups)
        fan_in = (in_ch // groups) * kh * kw
        scale = np.sqrt(2.0 / fan_in)
        self.weight = Parameter(
            rng.standard_normal((out_ch, in_ch // groups, kh, kw)).astype(np.float32) * scale)
        self.bias = Parameter(np.zeros(out_ch, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        return ops.conv2d(x, self.weight, self.bias, stride=s.stride,
                          padding=s.padding, dilation=s.dilation, groups=s.groups)


class Linear(Module):
    """Affine layer over the last axis; truncated-normal weights scaled by
    fan-in so activations keep their magnitude at small widths."""

    def __init__(self, rng, d_in: int, d_out: int, bias=True, std: float = None):
        super().__init__()
        if std is None:
            std = float(np.sqrt(1.0 / d_in))
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out), std=std))
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Per-channel batch norm with running statistics."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        mode = "train" if self.training else "eval"
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, mode=mode, eps=self.eps,
                              momentum=self.momentum)


class LayerNorm(Module):
    """Last-axis layer norm."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=np.float32))
        self.beta = Parameter(np.zeros(dim, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)
