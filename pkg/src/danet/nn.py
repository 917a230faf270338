"""Parameter containers and the convolution units the blocks are built from."""

from __future__ import annotations

import math
from typing import Iterator, Optional, Tuple

import numpy as np

from .autograd import functional as F
from .autograd.tensor import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    """A learnable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Attribute-driven container; parameter names follow attribute nesting.

    Children are discovered from instance attributes in assignment order:
    :class:`Parameter` values are parameters, other :class:`Tensor` values are
    buffers, and :class:`Module` values (or lists of them) are submodules.
    """

    training: bool = True

    def __call__(self, *args, **kwargs):
        tr = F.active_trace()
        if tr is None:
            return self.forward(*args, **kwargs)
        tr.scope.append(getattr(self, "_scope_name", type(self).__name__))
        try:
            return self.forward(*args, **kwargs)
        finally:
            tr.scope.pop()

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and not isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")

    def named_tensors(self) -> Iterator[Tuple[str, Tensor]]:
        """Parameters then buffers, in a stable order (the serialization order)."""
        yield from self.named_parameters()
        yield from self.named_buffers()

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    std = math.sqrt(2.0 / max(fan_in, 1))
    return (rng.standard_normal(shape) * std).astype(DEFAULT_DTYPE)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = False, zero_init: bool = False):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        shape = (cout, cin, kernel, kernel)
        w = np.zeros(shape, DEFAULT_DTYPE) if zero_init else he_normal(rng, shape, cin * kernel * kernel)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout, DEFAULT_DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator, bias: bool = False,
                 init_scale: float = 1.0):
        shape = (channels, 1, kernel, kernel)
        self.weight = Parameter(he_normal(rng, shape, kernel * kernel) * np.float32(init_scale))
        self.bias = Parameter(np.zeros(channels, DEFAULT_DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.depthwise_conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter(np.ones(channels, DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(channels, DEFAULT_DTYPE))
        self.running_mean = Tensor(np.zeros(channels, DEFAULT_DTYPE))
        self.running_var = Tensor(np.ones(channels, DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm(x, self.weight, self.bias, self.running_mean.data, self.running_var.data,
                           training=self.training, eps=self.eps, momentum=self.momentum)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, zero_init: bool = False):
        w = np.zeros((cout, cin), DEFAULT_DTYPE) if zero_init else he_normal(rng, (cout, cin), cin)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout, DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return F.fully_connected(x, self.weight, self.bias)


class BnReluConv(Module):
    """Pre-activation conv unit: BN, ReLU, then a (depthwise or dense) convolution."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 depthwise: bool = False, bias: bool = False):
        self.bn = BatchNorm2d(cin)
        if depthwise:
            if cin != cout:
                raise ValueError(f"depthwise unit needs cin == cout, got {cin} -> {cout}")
            self.conv = DepthwiseConv2d(cin, kernel, rng, bias=bias)
        else:
            self.conv = Conv2d(cin, cout, kernel, rng, bias=bias)
        self.in_channels = cin
        self.out_channels = cout

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.relu(self.bn(x)))
