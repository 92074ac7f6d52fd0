"""Parameter containers and the standard layers built on the primitives."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .rng import Rng
from .tensor import Tensor

DEFAULT_DTYPE = np.float32


class Parameter(Tensor):
    """A leaf tensor that a :class:`Module` owns and an optimizer updates."""

    __slots__ = ()

    def __init__(self, data, dtype=DEFAULT_DTYPE):
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Tree of named parameters.

    Parameters and child modules are discovered from instance attributes in
    assignment order; lists of modules are walked with their index as the
    name component (``blocks.0.ffn.project_in.weight``).
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{name}.{i}.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}


def _uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(shape, -bound, bound)


class Conv2d(Module):
    """``k x k`` convolution, weight ``k x k x c_in x c_out``.

    Initialized uniform in ``+-1/sqrt(fan_in)`` for weight and bias.
    """

    def __init__(self, cin: int, cout: int, k: int, rng: Rng, stride: int = 1, pad: int | None = None,
                 bias: bool = True):
        fan_in = cin * k * k
        self.weight = Parameter(_uniform(rng, (k, k, cin, cout), fan_in))
        self.bias = Parameter(_uniform(rng, (cout,), fan_in)) if bias else None
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class DepthwiseConv2d(Module):
    def __init__(self, c: int, k: int, rng: Rng, bias: bool = True):
        self.weight = Parameter(_uniform(rng, (k, k, c), k * k))
        self.bias = Parameter(_uniform(rng, (c,), k * k)) if bias else None
        self.pad = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight, self.bias, 1, self.pad)


class Dense(Module):
    """Affine map on the trailing axis."""

    def __init__(self, cin: int, cout: int, rng: Rng):
        self.weight = Parameter(_uniform(rng, (cin, cout), cin))
        self.bias = Parameter(_uniform(rng, (cout,), cin))

    def forward(self, x: Tensor) -> Tensor:
        return ops.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, c: int):
        self.weight = Parameter(np.ones(c))
        self.bias = Parameter(np.zeros(c))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias)
