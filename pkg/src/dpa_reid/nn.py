"""Module containers and the basic layers (convolution, batch norm, linear)."""
from __future__ import annotations

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Parameter, Tensor
from .autodiff.tensorio import load_container, save_container
from .exceptions import CheckpointMismatch, ShapeMismatch


def fan_in_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


class Module:
    """Attribute-walking container for parameters, buffers and child modules.

    Buffers are plain numpy arrays listed in ``_buffers`` (e.g. batch-norm
    running statistics); they are checkpointed but never differentiated.
    """

    _buffers: tuple = ()

    def __init__(self):
        self.training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        for name, p in self.named_parameters():
            p.name = name
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise CheckpointMismatch(f"missing keys {sorted(missing)}, unexpected keys {sorted(extra)}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise CheckpointMismatch(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def save_checkpoint(module: Module, path) -> None:
    save_container(path, module.state_dict())


def load_checkpoint(module: Module, path) -> None:
    module.load_state_dict(load_container(path))


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = False):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(fan_in_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.eps, self.momentum)


class Linear(Module):
    """Dense layer on N×D rows (weight stored D_in×D_out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, gain: float = 1.0):
        super().__init__()
        self.weight = Parameter(fan_in_normal(rng, (in_features, out_features), in_features, gain))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeMismatch(f"linear expects N×{self.weight.shape[0]}, got {x.shape}")
        y = F.matmul(x, self.weight)
        return F.add(y, self.bias) if self.bias is not None else y
