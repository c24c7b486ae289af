"""Module containers and the layers needed for residual CNNs."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A leaf tensor that is trained."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Base class with recursive parameter/buffer discovery.

    Attributes are discovered in assignment order, which keeps ``state_dict``
    keys and optimizer slots deterministic.
    """

    def __init__(self) -> None:
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def __getattr__(self, name: str):
        # only reached when normal lookup fails: expose buffers as attributes
        buffers = self.__dict__.get("_buffers")
        if buffers is not None and name in buffers:
            return buffers[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in self.__dict__.items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}.{key}" if prefix else key)

    def modules(self) -> Iterator[Module]:
        for _, m in self.named_modules():
            yield m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, m in self.named_modules(prefix):
            for key, buf in m._buffers.items():
                yield (f"{name}.{key}" if name else key), buf

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({f"buffer:{name}": buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, buf in self.named_buffers():
            buf[...] = state[f"buffer:{name}"]

    def mac_count(self, in_shape: tuple[int, ...]) -> tuple[int, tuple[int, ...]]:
        """Per-sample multiply-accumulates and output shape for a ``(C,H,W)`` input."""
        raise NotImplementedError(f"{type(self).__name__} has no static MAC count")


def _init_array(shape, rng: np.random.Generator | None, std: float | None = None,
                bound: float | None = None) -> np.ndarray:
    dtype = get_default_dtype()
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    if std is not None:
        return (rng.standard_normal(shape) * std).astype(dtype)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, bias: bool = False, rng: np.random.Generator | None = None):
        super().__init__()
        if min(in_channels, out_channels, kernel_size) < 1:
            raise ValueError("Conv2d sizes must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        # Kaiming normal (ReLU gain), fan-in mode
        self.weight = Parameter(_init_array((out_channels, in_channels, kernel_size, kernel_size),
                                            rng, std=math.sqrt(2.0 / fan_in)))
        self.bias = Parameter(_init_array((out_channels,), rng, bound=1.0 / math.sqrt(fan_in))) \
            if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ValueError(f"Conv2d expects {self.in_channels} channels, got input {in_shape}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def mac_count(self, in_shape):
        out = self.output_shape(in_shape)
        macs = self.out_channels * self.in_channels * self.kernel_size ** 2 * out[1] * out[2]
        return macs, out


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(_init_array((out_features, in_features), rng, bound=bound))
        self.bias = Parameter(_init_array((out_features,), rng, bound=bound)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def mac_count(self, in_shape):
        if in_shape[-1] != self.in_features:
            raise ValueError(f"Linear expects {self.in_features} features, got {in_shape}")
        return self.in_features * self.out_features, (self.out_features,)


class BatchNorm2d(Module):
    momentum = 0.1
    eps = 1e-5

    def __init__(self, num_features: int):
        super().__init__()
        dtype = get_default_dtype()
        self.num_features = num_features
        self.weight = Parameter(np.ones(num_features, dtype=dtype))
        self.bias = Parameter(np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(num_features, dtype=np.float64))
        self.register_buffer("running_var", np.ones(num_features, dtype=np.float64))

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(x, self.weight, self.bias, self._buffers["running_mean"],
                             self._buffers["running_var"], self.training, self.momentum, self.eps)

    def mac_count(self, in_shape):
        # normalization is not counted as multiply-accumulate work
        return 0, tuple(in_shape)
