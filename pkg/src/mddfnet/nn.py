"""Parameter-holding layers built on the tensor ops."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .tensor import ParamStore, Tensor


class Module:
    """Base class: parameters and sub-modules are discovered from attributes.

    Attribute insertion order fixes the parameter order, so a model built
    twice from the same seed yields an identical :class:`ParamStore`.
    """

    _scope_name = ""

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            object.__setattr__(value, "_scope_name", name)
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        with T.scope(self._scope_name or type(self).__name__):
            try:
                return self.forward(*args, **kwargs)
            except ContractError as exc:
                if not getattr(exc, "layer", None):
                    exc.layer = ".".join(T._SCOPE)  # innermost failing module
                raise

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> ParamStore:
        store = ParamStore()
        for name, t in self.named_parameters():
            store[name] = t
        return store

    def to(self, dtype) -> "Module":
        for _, t in self.named_parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self


class Sequential(Module):
    def __init__(self, *layers: Module):
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(v for k, v in vars(self).items() if isinstance(v, Module))

    def __len__(self):
        return sum(1 for _ in self)

    def __getitem__(self, i: int) -> Module:
        return getattr(self, str(i))

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv(Module):
    """k×k convolution with optional bias and SiLU."""

    def __init__(self, c_in: int, c_out: int, k: int = 1, stride: int = 1, padding: int | None = None,
                 groups: int = 1, bias: bool = True, act: bool = False, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if c_in % groups or c_out % groups:
            raise ConfigurationError(f"Conv: groups={groups} must divide {c_in} and {c_out}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        self.act = act
        fan_in = (c_in // groups) * k * k
        self.weight = T.parameter(kaiming_uniform(rng, (c_out, c_in // groups, k, k), fan_in))
        self.bias = T.parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)
        return T.silu(y) if self.act else y


class Norm(Module):
    def __init__(self, channels: int, kind: str = "layer", groups: int = 1, eps: float = 1e-5):
        self.kind, self.groups, self.eps = kind, groups, eps
        self.scale = T.parameter(np.ones(channels))
        self.shift = T.parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.norm(x, self.kind, self.scale, self.shift, self.eps, self.groups)
