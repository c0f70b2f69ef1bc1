"""Stateful layers built on :mod:`infarctseg.kernels`.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Parameter.grad`` during ``backward``.
Layers form a tree; parameters and buffers are addressed by dotted names.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import kernels as K
from .errors import ConfigurationError


class Parameter:
    """A trainable array with a same-shaped gradient slot."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter(shape={self.value.shape})"


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution; weights live in :class:`Conv2d`."""

    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    dilation: int = 1
    padding: str = "same"
    groups: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError(f"channel counts must be positive: {self}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.stride < 1 or self.dilation < 1:
            raise ConfigurationError(f"stride and dilation must be >= 1: {self}")
        if self.padding not in ("same", "valid"):
            raise ConfigurationError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(f"groups={self.groups} must divide both channel counts")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels // self.groups, k, k)

    def output_size(self, size: int) -> int:
        pad = K.resolve_padding(self.padding, self.kernel_size, self.dilation)
        return K.conv_output_size(size, self.kernel_size, self.stride, self.dilation, pad)


class Layer:
    """Base class: a node of the model tree."""

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.forward(x, train)

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def modules(self) -> Iterator["Layer"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def kink_state(self) -> np.ndarray | None:
        """Which linear piece each unit sat on during the last forward (None if smooth)."""
        return None

    def own_parameters(self) -> dict[str, Parameter]:
        return {}

    def own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self.own_parameters().items():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self.own_buffers().items():
            yield prefix + name, b
        for cname, child in self.children():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


class Conv2d(Layer):
    """Convolution layer. ``bias=False`` keeps a constant zero bias, as used before batch norm."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator | None = None, bias: bool = True):
        self.spec = spec
        shape = spec.weight_shape
        fan_in = shape[1] * shape[2] * shape[3]
        if rng is None:
            w = np.zeros(shape)
        else:
            w = rng.normal(0.0, K.fan_in_std(fan_in), size=shape)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(spec.out_channels))
        self.has_bias = bias
        self._x = None

    def own_parameters(self):
        if self.has_bias:
            return {"weight": self.weight, "bias": self.bias}
        return {"weight": self.weight}

    def forward(self, x, train=False):
        s = self.spec
        if x.shape[1] != s.in_channels:
            raise ConfigurationError(
                f"conv expects {s.in_channels} input channels, got {x.shape[1]}"
            )
        self._x = x
        return K.conv2d(x, self.weight.value, self.bias.value, s.stride, s.dilation, s.padding, s.groups)

    def backward(self, dout):
        s = self.spec
        dx, dw, db = K.conv2d_backward(dout, self._x, self.weight.value, s.stride, s.dilation, s.padding, s.groups)
        self.weight.grad += dw
        if self.has_bias:
            self.bias.grad += db
        return dx


class BatchNorm2d(Layer):
    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._cache = None

    def own_parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False):
        out, self._cache = K.batch_norm(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var, train
        )
        return out

    def backward(self, dout):
        dx, dg, db = K.batch_norm_backward(dout, self._cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class Activation(Layer):
    def __init__(self, kind: str = "relu"):
        if kind not in ("relu", "relu6"):
            raise ConfigurationError(f"unknown activation {kind!r}")
        self.kind = kind
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return K.activation(x, self.kind)

    def backward(self, dout):
        return K.activation_backward(dout, self._x, self.kind)

    def kink_state(self):
        if self._x is None:
            return None
        state = (self._x > 0.0).astype(np.int8)
        if self.kind == "relu6":
            state += self._x >= 6.0
        return state


class MaxPool2d(Layer):
    def __init__(self, kernel: int = 3, stride: int = 2, pad: int = 1):
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self._cache = None

    def forward(self, x, train=False):
        out, idx = K.max_pool2d(x, self.kernel, self.stride, self.pad)
        self._cache = (idx, x.shape)
        return out

    def backward(self, dout):
        idx, shape = self._cache
        return K.max_pool2d_backward(dout, idx, shape, self.kernel, self.stride, self.pad)

    def kink_state(self):
        return None if self._cache is None else self._cache[0]


class Sequential(Layer):
    def __init__(self, *layers: Layer, names: list[str] | None = None):
        self.layers = list(layers)
        self.names = names or [str(i) for i in range(len(layers))]

    def children(self):
        return list(zip(self.names, self.layers))

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


def conv_bn_act(spec: ConvSpec, rng, act: str | None = "relu") -> Sequential:
    """Convolution -> batch norm -> optional activation.

    The convolution carries no bias: batch norm would cancel it exactly.
    """
    parts: list[Layer] = [Conv2d(spec, rng, bias=False), BatchNorm2d(spec.out_channels)]
    names = ["conv", "bn"]
    if act is not None:
        parts.append(Activation(act))
        names.append("act")
    return Sequential(*parts, names=names)


class DepthwiseSeparable(Sequential):
    """Depthwise 3x3 -> pointwise 1x1.

    With ``fused=True`` batch norm and ReLU follow both stages; with
    ``fused=False`` it is the bare kernel composition.
    """

    def __init__(self, in_channels: int, out_channels: int, rng, stride: int = 1,
                 dilation: int = 1, fused: bool = True, kernel_size: int = 3):
        dw = ConvSpec(in_channels, in_channels, kernel_size, stride, dilation, groups=in_channels)
        pw = ConvSpec(in_channels, out_channels, 1)
        if fused:
            super().__init__(conv_bn_act(dw, rng), conv_bn_act(pw, rng), names=["depthwise", "pointwise"])
        else:
            super().__init__(Conv2d(dw, rng), Conv2d(pw, rng), names=["depthwise", "pointwise"])
        self.fused = fused
