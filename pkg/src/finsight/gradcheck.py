"""Analytic-vs-finite-difference gradient checks for every differentiable op.

Each case builds random float64 inputs for a seed and a function from input
Vars to an output Var. The scalar under test is ``sum(r * out)`` for a fixed
random ``r``; its autodiff gradient is compared with central differences
element by element.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .epafpn import NeckConfig, make_neck
from .msddsp import Branch3, MsDdsp, MsDdspConfig, fuse
from .nn import as_vars
from .tensor import autograd as ag
from .tensor import functional as F

TOLERANCE = 1e-4
EPS = 1e-5
DEFAULT_SEEDS = 20


@dataclass
class Case:
    name: str
    make: Callable[[np.random.Generator], tuple[dict[str, np.ndarray], Callable[[dict], ag.Var]]]


def _conv_case(spec: F.ConvSpec, shape):
    def make(rng):
        inputs = {"x": rng.normal(size=shape), "w": rng.normal(size=spec.weight_shape),
                  "b": rng.normal(size=spec.out_channels)}
        return inputs, lambda v: ag.conv2d(v["x"], v["w"], v["b"], spec)
    return make


def _dsc(rng):
    c = 3
    dw, pw = F.depthwise_spec(c), F.pointwise_spec(c, 4)
    inputs = {"x": rng.normal(size=(1, c, 5, 5)), "dw": rng.normal(size=dw.weight_shape),
              "pw": rng.normal(size=pw.weight_shape)}
    return inputs, lambda v: ag.conv2d(ag.conv2d(v["x"], v["dw"], None, dw), v["pw"], None, pw)


def _fusion(rng):
    inputs = {f"x{n}": rng.normal(size=(2, 2, 3, 3)) for n in range(4)}
    return inputs, lambda v: fuse([v[f"x{n}"] for n in range(4)])[0]


def _se_gate(rng):
    cfg = MsDdspConfig(16, squeeze_ratio=2)
    layer = Branch3("b3", cfg)
    params = {k: rng.normal(size=a.shape) for k, a in layer.init(rng).items()}
    inputs = dict(params, x=rng.normal(size=(2, 4, 3, 3)))
    return inputs, lambda v: layer(v, v["x"])


def _neck(variant):
    def make(rng):
        cfg = NeckConfig(variant, 4, ((2, 4), (3, 5)), {2: 1, 3: 3, 4: 4, 5: 4})
        neck = make_neck(cfg)
        params = as_vars(neck.init(rng))
        sizes = {2: 8, 3: 4, 4: 2, 5: 1}
        inputs = {f"C{k}": rng.normal(size=(1, cfg.in_channels[k], s, s)) for k, s in sizes.items()}

        def fn(v):
            out = neck(params, {k: v[f"C{k}"] for k in sizes})
            return ag.concat_channels([_flat(out[i]) for i in sorted(out)])
        return inputs, fn
    return make


def _flat(v: ag.Var) -> ag.Var:
    """(N, C, H, W) -> (N, C*H*W, 1, 1) so levels of any size can be concatenated."""
    shape = v.data.shape
    return ag.Var(v.data.reshape(shape[0], -1, 1, 1), (v,), lambda g: v._accumulate(g.reshape(shape)))


def _msddsp(rng):
    cfg = MsDdspConfig(8, squeeze_ratio=2)
    block = MsDdsp(cfg)
    params = as_vars(block.init(rng))
    inputs = {"x": rng.normal(size=(1, 8, 4, 4))}
    return inputs, lambda v: block(params, v["x"])


CASES = {c.name: c for c in [
    Case("conv2d", _conv_case(F.ConvSpec(2, 3, 3, 1, 1), (1, 2, 5, 5))),
    Case("conv2d_dilated", _conv_case(F.ConvSpec(2, 2, 3, 1, 2, dilation=2), (1, 2, 4, 4))),
    Case("conv2d_grouped", _conv_case(F.ConvSpec(4, 6, 3, 2, 1, groups=2), (1, 4, 5, 5))),
    Case("depthwise_separable", _dsc),
    Case("gap", lambda rng: ({"x": rng.normal(size=(2, 3, 4, 5))}, lambda v: ag.expand_hw(ag.gap(v["x"])))),
    Case("softmax_fusion", _fusion),
    Case("se_gate", _se_gate),
    Case("silu", lambda rng: ({"x": np.concatenate([[-2.0, 0.5, 3.0], rng.normal(size=5)]).reshape(1, 1, 2, 4)},
                              lambda v: ag.silu(v["x"]))),
    Case("upsample", lambda rng: ({"x": rng.normal(size=(1, 2, 3, 3))}, lambda v: ag.upsample_nearest(v["x"], 2))),
    Case("neck_topdown", _neck("topdown-fpn")),
    Case("neck_panet", _neck("panet")),
    Case("neck_epa", _neck("epa-fpn")),
    Case("msddsp", _msddsp),
]}


def check_case(case: Case, seed: int, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    inputs, fn = case.make(rng)
    probe = None

    def scalar(vals: dict[str, np.ndarray]) -> float:
        out = fn({k: ag.Var(a) for k, a in vals.items()})
        return float(np.sum(probe * out.data))

    vars_ = {k: ag.Var(a, requires_grad=True, name=k) for k, a in inputs.items()}
    out = fn(vars_)
    probe = np.random.default_rng(seed + 10_000).normal(size=out.data.shape)
    out.backward(probe)
    worst = 0.0
    for name, arr in inputs.items():
        analytic = vars_[name].grad if vars_[name].grad is not None else np.zeros_like(arr)

        def f(x, name=name):
            return scalar(dict(inputs, **{name: x}))

        numeric = F.finite_diff_grad(f, arr, eps)
        worst = max(worst, F.rel_error(analytic, numeric))
    return worst


def run(names=None, seeds: int = DEFAULT_SEEDS, eps: float = EPS) -> list[dict]:
    """Max relative error per op over ``seeds`` random instances."""
    names = list(CASES) if names is None else list(names)
    rows = []
    for name in names:
        t0 = time.perf_counter()
        err = max(check_case(CASES[name], s, eps) for s in range(seeds))
        rows.append({"op": name, "seeds": seeds, "max_rel_err": err, "tol": TOLERANCE,
                     "ok": err <= TOLERANCE, "seconds": time.perf_counter() - t0})
    return rows
