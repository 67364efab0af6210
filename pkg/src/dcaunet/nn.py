"""Parameter registry and the layer zoo built on the tensor kernels."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor; modules auto-register attributes of this type."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def trunc_normal(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class Module:
    """Base class holding named parameters, buffers, and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        object.__setattr__(self, name, value)
        return value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, param in self._params.items():
            yield prefix + name, param
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, index):
        return self._items[index]


class Linear(Module):
    """y = x @ W (+ b) over the last axis; weight stored (in, out)."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, std: float = 0.02):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(trunc_normal((in_features, out_features), std, rng))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x.reshape((-1, x.shape[-1])) if x.ndim != 2 else x
        y = flat @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(lead + (y.shape[-1],)) if x.ndim != 2 else y


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, std: float = 0.02):
        super().__init__()
        if in_channels % groups != 0:
            raise ShapeError(f"in_channels={in_channels} not divisible by groups={groups}")
        rng = rng or np.random.default_rng(0)
        shape = (kernel, kernel, in_channels // groups, out_channels)
        self.weight = Parameter(trunc_normal(shape, std, rng))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias, eps=self.eps)


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gain = Parameter(np.ones(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.rmsnorm(x, self.gain, eps=self.eps)


class BatchNorm2d(Module):
    """Channels-last batch norm with running statistics (momentum 0.1)."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if eps <= 0:
            raise ConfigError(f"batchnorm eps must be positive, got {eps}")
        self.gain = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.eps = eps
        self.momentum = momentum
        self.track_stats = True

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm(x, self.gain, self.bias, self.running_mean, self.running_var,
                           training=self.training, momentum=self.momentum, eps=self.eps,
                           update_running=self.training and self.track_stats)


class Mlp(Module):
    """Two-layer token MLP with GELU in between."""

    def __init__(self, dim: int, hidden: int, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.fc2 = Linear(hidden, dim, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
