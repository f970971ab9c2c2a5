"""Four-branch decoupled bottleneck with softmax-normalised branch fusion.

Input is adjusted by a 1x1 CBS, quartered along channels, and each quarter
goes through its own branch:

1. staged dilated 3x3 residual convolutions (growing receptive field)
2. depthwise 3x3 + pointwise 1x1 (spatial/channel decorrelation)
3. squeeze-excite channel gate
4. identity (detail preservation)

Per channel position, the four branch means are softmax-normalised across
branches and used to scale each branch block before concatenation. A final
1x1 CBS mixes the result.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, GeometryError
from .nn import CBS, Conv, Layer, as_vars, join, kaiming_uniform
from .tensor import autograd as ag
from .tensor import functional as F

N_BRANCHES = 4


@dataclass(frozen=True)
class MsDdspConfig:
    channels: int
    dilations: tuple[int, ...] = (1, 2, 3)
    squeeze_ratio: int = 4
    fusion: str = "weighted-concat"
    branch1_kernel: int = 3
    disabled_branches: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        object.__setattr__(self, "disabled_branches", frozenset(int(b) for b in self.disabled_branches))
        if self.channels < N_BRANCHES or self.channels % N_BRANCHES:
            raise ConfigError(f"channels={self.channels} must be a positive multiple of 4")
        if not self.dilations or min(self.dilations) < 1:
            raise ConfigError("dilation schedule must be a non-empty list of positive ints")
        for d in self.dilations:
            if d * (self.branch1_kernel - 1) % 2:
                raise GeometryError(f"dilation {d} with kernel {self.branch1_kernel} cannot keep the input size")
        if self.squeeze_ratio < 1 or self.quarter % self.squeeze_ratio:
            raise ConfigError(f"squeeze ratio {self.squeeze_ratio} does not divide {self.quarter} channels")
        if self.fusion != "weighted-concat":
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if not self.disabled_branches <= {1, 2, 3, 4}:
            raise ConfigError(f"disabled branches must be in 1..4, got {sorted(self.disabled_branches)}")

    @property
    def quarter(self) -> int:
        return self.channels // N_BRANCHES


@dataclass
class BranchWeights:
    """Branch statistics ``stats`` and softmax weights ``beta``.

    Both are shaped (4, N, C/4): branch, batch element, channel position.
    """

    stats: np.ndarray
    beta: np.ndarray

    def mean_beta(self) -> list[float]:
        return [float(b) for b in self.beta.mean(axis=(1, 2))]


def receptive_field(dilations: Sequence[int], kernel: int = 3) -> int:
    rf = 1
    for d in dilations:
        rf += d * (kernel - 1)
    return rf


class Branch1(Layer):
    def __init__(self, name, cfg: MsDdspConfig):
        self.name = name
        self.stages = [Conv(join(name, str(k)), cfg.quarter, cfg.quarter, cfg.branch1_kernel, dilation=d)
                       for k, d in enumerate(cfg.dilations)]

    def children(self):
        return self.stages

    def __call__(self, p, x):
        y = x
        for stage in self.stages:
            y = ag.add(y, ag.silu(stage(p, y)))
        return y


class Branch2(Layer):
    def __init__(self, name, cfg: MsDdspConfig):
        self.name = name
        q = cfg.quarter
        self.dw = Conv(join(name, "dw"), q, q, 3, groups=q)
        self.pw = Conv(join(name, "pw"), q, q, 1)

    def children(self):
        return [self.dw, self.pw]

    def __call__(self, p, x):
        return self.pw(p, self.dw(p, x))


class Branch3(Layer):
    def __init__(self, name, cfg: MsDdspConfig):
        self.name = name
        self.c = cfg.quarter
        self.hidden = cfg.quarter // cfg.squeeze_ratio

    def own_params(self, rng, dtype):
        return {
            join(self.name, "down.w"): kaiming_uniform(rng, (self.hidden, self.c), self.c, dtype),
            join(self.name, "down.b"): np.zeros(self.hidden, dtype=dtype),
            join(self.name, "up.w"): kaiming_uniform(rng, (self.c, self.hidden), self.hidden, dtype),
            join(self.name, "up.b"): np.zeros(self.c, dtype=dtype),
        }

    def gate(self, p, x):
        s = ag.gap(x)
        h = ag.silu(ag.linear(s, p[join(self.name, "down.w")], p[join(self.name, "down.b")]))
        return ag.sigmoid(ag.linear(h, p[join(self.name, "up.w")], p[join(self.name, "up.b")]))

    def __call__(self, p, x):
        return ag.mul(x, ag.expand_hw(self.gate(p, x)))


def fuse(branch_outputs: Sequence[ag.Var]):
    """Softmax-weighted concatenation; returns (Y, stats Var, beta Var)."""
    if len(branch_outputs) != N_BRANCHES:
        raise DimensionError(f"expected {N_BRANCHES} branch outputs, got {len(branch_outputs)}")
    ag.check_same_shape(branch_outputs, "attention_fuse")
    stats = ag.stack([ag.gap(o) for o in branch_outputs], axis=0)
    beta = ag.softmax(stats, axis=0)
    blocks = [ag.mul(o, ag.expand_hw(ag.index(beta, n, axis=0))) for n, o in enumerate(branch_outputs)]
    return ag.concat_channels(blocks), stats, beta


class MsDdsp(Layer):
    def __init__(self, cfg: MsDdspConfig, name: str = ""):
        self.cfg = cfg
        self.name = name
        c = cfg.channels
        self.adjust = CBS(join(name, "adjust"), c, c, 1)
        self.b1 = Branch1(join(name, "b1"), cfg)
        self.b2 = Branch2(join(name, "b2"), cfg)
        self.b3 = Branch3(join(name, "b3"), cfg)
        self.out = CBS(join(name, "out"), c, c, 1)

    def children(self):
        return [self.adjust, self.b1, self.b2, self.b3, self.out]

    def branches(self, p, parts: Sequence[ag.Var]) -> list[ag.Var]:
        outs = [self.b1(p, parts[0]), self.b2(p, parts[1]), self.b3(p, parts[2]), parts[3]]
        for n in self.cfg.disabled_branches:
            outs[n - 1] = ag.zeros_like(parts[n - 1])
        return outs

    def __call__(self, p, x, trace: dict | None = None):
        if x.data.shape[1] != self.cfg.channels:
            raise DimensionError(f"input has {x.data.shape[1]} channels, config expects {self.cfg.channels}")
        adjusted = self.adjust(p, x)
        parts = ag.split_channels(adjusted, N_BRANCHES)
        outs = self.branches(p, parts)
        fused, stats, beta = fuse(outs)
        y = self.out(p, fused)
        if trace is not None:
            trace.update(adjusted=adjusted.data, branches=[o.data for o in outs], fused=fused.data,
                         weights=BranchWeights(stats.data, beta.data))
        return y


def identity_branch_params(cfg: MsDdspConfig, params: dict[str, np.ndarray], prefix: str = "",
                           gate_bias: float = 50.0) -> dict[str, np.ndarray]:
    """Copy of ``params`` with branches 1-3 set to the identity map.

    Branch 1 residual convs are zeroed, branch 2 gets a centre-one depthwise
    kernel and an identity pointwise matrix, branch 3's gate is saturated to 1.
    """
    p = dict(params)
    q = cfg.quarter
    for k in range(len(cfg.dilations)):
        key = join(prefix, f"b1.{k}")
        p[key + ".w"] = np.zeros_like(params[key + ".w"])
        p[key + ".b"] = np.zeros_like(params[key + ".b"])
    dw = np.zeros_like(params[join(prefix, "b2.dw.w")])
    dw[:, 0, 1, 1] = 1.0
    p[join(prefix, "b2.dw.w")] = dw
    p[join(prefix, "b2.dw.b")] = np.zeros(q)
    p[join(prefix, "b2.pw.w")] = np.eye(q).reshape(q, q, 1, 1)
    p[join(prefix, "b2.pw.b")] = np.zeros(q)
    p[join(prefix, "b3.down.w")] = np.zeros_like(params[join(prefix, "b3.down.w")])
    p[join(prefix, "b3.up.w")] = np.zeros_like(params[join(prefix, "b3.up.w")])
    p[join(prefix, "b3.up.b")] = np.full(q, gate_bias)
    return p


# numpy-level API over the same parameter dicts ---------------------------------

def _run(fn, x, params):
    return fn(as_vars(params), ag.Var(F.as_tensor(x))).data


def branch1_multiscale(x1, params, cfg: MsDdspConfig) -> np.ndarray:
    return _run(Branch1("b1", cfg), x1, params)


def branch2_decorrelate(x2, params, cfg: MsDdspConfig) -> np.ndarray:
    return _run(Branch2("b2", cfg), x2, params)


def branch3_channel_weight(x3, params, cfg: MsDdspConfig) -> np.ndarray:
    return _run(Branch3("b3", cfg), x3, params)


def branch3_gate(x3, params, cfg: MsDdspConfig) -> np.ndarray:
    return Branch3("b3", cfg).gate(as_vars(params), ag.Var(F.as_tensor(x3))).data


def branch4_identity(x4) -> np.ndarray:
    return x4


def attention_fuse(branch_outputs: Sequence[np.ndarray]) -> tuple[np.ndarray, BranchWeights]:
    y, stats, beta = fuse([ag.Var(F.as_tensor(o)) for o in branch_outputs])
    return y.data, BranchWeights(stats.data, beta.data)


def msddsp_forward(x, cfg: MsDdspConfig, params, trace: dict | None = None) -> np.ndarray:
    x = F.as_tensor(x)
    return MsDdsp(cfg)(as_vars(params), ag.Var(x), trace=trace).data


def branch2_param_count(quarter: int) -> int:
    return 9 * quarter + quarter + quarter * quarter + quarter


def branch_weight_dump(records: dict[str, BranchWeights]) -> str:
    """JSON list of per-branch mean weights keyed by input identifier."""
    rows = [{"id": key, "beta": w.mean_beta()} for key, w in records.items()]
    return json.dumps(rows, indent=2)
