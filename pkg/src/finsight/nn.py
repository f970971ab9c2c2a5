"""Parameterised building blocks.

Layers are stateless descriptions: ``init`` returns a flat ``{name: array}``
dict and ``__call__(p, x)`` evaluates the layer given a dict of
:class:`~finsight.tensor.autograd.Var` parameters.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import autograd as ag
from .tensor.functional import ConvSpec


class Layer:
    name: str = ""

    def children(self) -> list["Layer"]:
        return []

    def own_params(self, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
        return {}

    def init(self, rng: np.random.Generator | int = 0, dtype=np.float64) -> dict[str, np.ndarray]:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        out = self.own_params(rng, dtype)
        for child in self.children():
            out.update(child.init(rng, dtype))
        return out

    def param_count(self) -> int:
        return sum(int(np.prod(a.shape)) for a in self.init(0).values())


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


class Conv(Layer):
    """Plain convolution with optional bias; no normalisation or activation."""

    def __init__(self, name: str, cin: int, cout: int, k: int = 1, stride: int = 1,
                 dilation: int = 1, groups: int = 1, bias: bool = True, padding: int | None = None):
        self.name = name
        if padding is None:
            padding = dilation * (k - 1) // 2
        self.spec = ConvSpec(cin, cout, (k, k), stride, padding, dilation, groups, bias)

    def own_params(self, rng, dtype):
        s = self.spec
        fan_in = s.in_channels // s.groups * s.kernel[0] * s.kernel[1]
        out = {join(self.name, "w"): kaiming_uniform(rng, s.weight_shape, fan_in, dtype)}
        if s.has_bias:
            out[join(self.name, "b")] = np.zeros(s.out_channels, dtype=dtype)
        return out

    def __call__(self, p, x):
        b = p[join(self.name, "b")] if self.spec.has_bias else None
        return ag.conv2d(x, p[join(self.name, "w")], b, self.spec)


class CBS(Layer):
    """Conv (no bias) -> per-channel scale/shift -> SiLU.

    The normalisation uses running statistics frozen at mean 0, variance 1,
    so it reduces to a learned affine map.
    """

    def __init__(self, name: str, cin: int, cout: int, k: int = 1, stride: int = 1,
                 dilation: int = 1, groups: int = 1):
        self.name = name
        self.conv = Conv(join(name, "conv"), cin, cout, k, stride, dilation, groups, bias=False)

    @property
    def spec(self) -> ConvSpec:
        return self.conv.spec

    def children(self):
        return [self.conv]

    def own_params(self, rng, dtype):
        c = self.conv.spec.out_channels
        return {join(self.name, "scale"): np.ones(c, dtype=dtype),
                join(self.name, "shift"): np.zeros(c, dtype=dtype)}

    def __call__(self, p, x):
        y = self.conv(p, x)
        y = ag.channel_affine(y, p[join(self.name, "scale")], p[join(self.name, "shift")])
        return ag.silu(y)


def as_vars(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, ag.Var]:
    return {k: ag.Var(v, requires_grad=requires_grad, name=k) for k, v in params.items()}
