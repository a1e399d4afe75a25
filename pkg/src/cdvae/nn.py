"""Parameter containers and the layers used by the networks."""
from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Attribute-walking parameter registry.

    Parameters, sub-modules, lists of sub-modules and :class:`SpectralState`
    buffers are discovered from instance attributes in definition order.
    Attributes whose name starts with ``_`` are skipped, which is how a module
    borrows another module's parameters without registering them twice.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(val, Parameter):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, F.SpectralState]]:
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(val, F.SpectralState):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_buffers(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


@contextlib.contextmanager
def frozen(*modules: Module):
    """Stop gradients from accumulating in the parameters of ``modules``."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _he(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    std = gain * np.sqrt(2.0 / (1.0 + F.LRELU_SLOPE ** 2) / fan_in)
    return rng.standard_normal(shape) * std


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None, bias: bool = True, gain: float = 1.0):
        rng = rng or np.random.default_rng(0)
        dt = get_default_dtype()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(_he(rng, (cout, cin, k, k), cin * k * k, gain), dtype=dt)
        self.bias = Parameter(np.zeros(cout), dtype=dt) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 4, stride: int = 2, padding: int = 1,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        dt = get_default_dtype()
        self.stride, self.padding = stride, padding
        fan = cin * k * k // (stride * stride)
        self.weight = Parameter(_he(rng, (cin, cout, k, k), fan), dtype=dt)
        self.bias = Parameter(np.zeros(cout), dtype=dt)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator | None = None, bias: bool = True,
                 gain: float = 1.0):
        rng = rng or np.random.default_rng(0)
        dt = get_default_dtype()
        self.weight = Parameter(_he(rng, (cout, cin), cin, gain), dtype=dt)
        self.bias = Parameter(np.zeros(cout), dtype=dt) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class SNConv2d(Conv2d):
    """Conv2d whose weight is divided by its estimated spectral norm on every call."""

    def __init__(self, *args, n_power_iterations: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        self.sn = F.SpectralState.warm(self.weight.data, n_power_iterations)

    def forward(self, x: Tensor) -> Tensor:
        w = F.spectral_normalize(self.weight, self.sn, update=self.training)
        return F.conv2d(x, w, self.bias, self.stride, self.padding)


class SNLinear(Linear):
    def __init__(self, *args, n_power_iterations: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        self.sn = F.SpectralState.warm(self.weight.data, n_power_iterations)

    def forward(self, x: Tensor) -> Tensor:
        w = F.spectral_normalize(self.weight, self.sn, update=self.training)
        return F.linear(x, w, self.bias)
