"""Pyramid necks: top-down FPN, PANet, and the pruned long-skip EPA-FPN.

All three map backbone levels C2..C5 (strides 4..32) to outputs P3..P5 at a
single channel width, so they are interchangeable in the detector.

EPA-FPN runs one top-down pass to get P_in, then builds each output as

    P_out[i] = concat(psi_i(C_i), sum_j trans_{j->i}(source_j))

where psi is a 1x1 CBS to width/2 and every trans edge resamples its source
to level i and projects it to width/2 with a plain 1x1 conv. Each output
gets one nearest cross-level edge from P_in plus the configured long skips
from shallow backbone levels. There is no bottom-up pass.
"""
from __future__ import annotations

import graphlib
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, TopologyError
from .nn import CBS, Conv, Layer, as_vars, join
from .tensor import autograd as ag

VARIANTS = ("topdown-fpn", "panet", "epa-fpn")
ALIASES = {"fpn": "topdown-fpn", "topdown": "topdown-fpn", "epa": "epa-fpn", "epafpn": "epa-fpn"}
LEVEL_STRIDE = {2: 4, 3: 8, 4: 16, 5: 32}
OUTPUT_LEVELS = (3, 4, 5)
DEFAULT_LONG_SKIPS = ((2, 4), (3, 5))
DEFAULT_IN_CHANNELS = {2: 16, 3: 32, 4: 64, 5: 128}


def canonical_variant(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ConfigError(f"unknown neck variant {name!r}; choose from {', '.join(VARIANTS)}")
    return name


@dataclass
class PyramidFeatures:
    levels: dict[int, np.ndarray]

    @property
    def strides(self) -> dict[int, int]:
        return {k: LEVEL_STRIDE[k] for k in self.levels}

    @property
    def widths(self) -> dict[int, int]:
        return {k: v.shape[1] for k, v in self.levels.items()}

    def __getitem__(self, k):
        return self.levels[k]

    def check(self):
        ks = sorted(self.levels)
        for a, b in zip(ks, ks[1:]):
            ha, wa = self.levels[a].shape[2:]
            hb, wb = self.levels[b].shape[2:]
            if b != a + 1 or (ha, wa) != (2 * hb, 2 * wb):
                raise TopologyError(f"levels {a} and {b} are not adjacent 2x pyramid levels")
        return self


@dataclass(frozen=True)
class NeckConfig:
    variant: str = "epa-fpn"
    width: int = 64
    long_skips: tuple[tuple[int, int], ...] = DEFAULT_LONG_SKIPS
    in_channels: Mapping[int, int] = field(default_factory=lambda: dict(DEFAULT_IN_CHANNELS))

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        object.__setattr__(self, "long_skips", tuple((int(s), int(t)) for s, t in self.long_skips))
        object.__setattr__(self, "in_channels", {int(k): int(v) for k, v in dict(self.in_channels).items()})
        if self.width < 2 or self.width % 2:
            raise ConfigError("neck width must be an even number >= 2")
        if len(set(self.long_skips)) != len(self.long_skips):
            raise ConfigError(f"duplicate long-skip edges in {self.long_skips}")
        for s, t in self.long_skips:
            if t not in OUTPUT_LEVELS or s not in LEVEL_STRIDE:
                raise TopologyError(f"long skip {s}->{t} references an unknown level")
            if abs(s - t) < 2:
                raise ConfigError(f"long skip {s}->{t} is adjacent; long skips must span >= 2 levels")


def _present_outputs(levels) -> list[int]:
    if 5 not in levels:
        raise TopologyError("pyramid is missing C5")
    outs = [5]
    for k in (4, 3):
        if k not in levels:
            break
        outs.append(k)
    if 3 in levels and 3 not in outs:
        raise TopologyError("pyramid has C3 but is missing C4")
    return sorted(outs)


class TopDown(Layer):
    """P5 = CBS1x1(C5); P_i = CBS3x3(concat(C_i, Up(P_{i+1})))."""

    def __init__(self, name: str, cfg: NeckConfig):
        self.name = name
        w, c = cfg.width, cfg.in_channels
        self.lat5 = CBS(join(name, "lat5"), c[5], w, 1)
        self.fuse = {i: CBS(join(name, f"fuse{i}"), c[i] + w, w, 3) for i in (4, 3)}

    def children(self):
        return [self.lat5, self.fuse[4], self.fuse[3]]

    def __call__(self, p, feats: dict) -> dict:
        outs = _present_outputs(feats)
        P = {5: self.lat5(p, feats[5])}
        for i in (4, 3):
            if i in outs:
                up = ag.upsample_nearest(P[i + 1], 2)
                P[i] = self.fuse[i](p, ag.concat_channels([feats[i], up]))
        return P

    def edges(self):
        e = [("C5", "Pin5", "cbs1x1", self.lat5.param_count())]
        for i in (4, 3):
            n = self.fuse[i].param_count()
            e += [(f"C{i}", f"Pin{i}", "concat+cbs3x3", n), (f"Pin{i+1}", f"Pin{i}", "up2+concat", 0)]
        return e


class Neck(Layer):
    variant: str

    def __init__(self, cfg: NeckConfig, name: str = "neck"):
        self.cfg = cfg
        self.name = name
        self.td = TopDown(join(name, "td"), cfg)

    def children(self):
        return [self.td]

    def graph(self) -> dict:
        edges = self.edges()
        nodes = sorted({n for e in edges for n in e[:2]})
        return {"variant": self.variant, "nodes": nodes,
                "edges": [{"src": s, "dst": d, "op": op, "params": n} for s, d, op, n in edges]}

    def check_acyclic(self) -> list[str]:
        ts = graphlib.TopologicalSorter()
        for s, d, _, _ in self.edges():
            ts.add(d, s)
        return list(ts.static_order())


class TopDownFPN(Neck):
    variant = "topdown-fpn"

    def __call__(self, p, feats):
        return self.td(p, feats)

    def edges(self):
        return self.td.edges() + [(f"Pin{i}", f"P{i}", "identity", 0) for i in OUTPUT_LEVELS]


class PANet(Neck):
    variant = "panet"

    def __init__(self, cfg, name="neck"):
        super().__init__(cfg, name)
        w = cfg.width
        self.down = {i: CBS(join(name, f"down{i}"), w, w, 3, stride=2) for i in (3, 4)}
        self.bu = {i: CBS(join(name, f"bu{i}"), 2 * w, w, 3) for i in (4, 5)}

    def children(self):
        return [self.td, self.down[3], self.down[4], self.bu[4], self.bu[5]]

    def __call__(self, p, feats):
        P = self.td(p, feats)
        N = {min(P): P[min(P)]}
        for i in range(min(P) + 1, 6):
            d = self.down[i - 1](p, N[i - 1])
            N[i] = self.bu[i](p, ag.concat_channels([d, P[i]]))
        return N

    def edges(self):
        e = self.td.edges() + [("Pin3", "P3", "identity", 0)]
        for i in (4, 5):
            e += [(f"P{i-1}", f"P{i}", "cbs3x3s2+concat", self.down[i - 1].param_count()),
                  (f"Pin{i}", f"P{i}", "concat+cbs3x3", self.bu[i].param_count())]
        return e


class Trans(Layer):
    """Resample a source map to a target level, then project with a 1x1 conv.

    Downsampling uses one stride-2 3x3 CBS per halving; upsampling is
    nearest-neighbour.
    """

    def __init__(self, name: str, src_level: int, dst_level: int, cin: int, cout: int):
        self.name = name
        self.src_level, self.dst_level = src_level, dst_level
        steps = max(dst_level - src_level, 0)
        self.down = [CBS(join(name, f"down{k}"), cin, cin, 3, stride=2) for k in range(steps)]
        self.up = 2 ** max(src_level - dst_level, 0)
        self.proj = Conv(join(name, "proj"), cin, cout, 1)

    def children(self):
        return self.down + [self.proj]

    def __call__(self, p, x):
        for layer in self.down:
            x = layer(p, x)
        return self.proj(p, ag.upsample_nearest(x, self.up))

    @property
    def op(self) -> str:
        if self.down:
            return f"{len(self.down)}x(cbs3x3s2)+conv1x1"
        return f"up{self.up}+conv1x1" if self.up > 1 else "conv1x1"


class EPAFPN(Neck):
    variant = "epa-fpn"
    # nearest cross level feeding each output from the top-down pass
    CROSS = {3: 4, 4: 3, 5: 4}

    def __init__(self, cfg, name="neck"):
        super().__init__(cfg, name)
        w, c = cfg.width, cfg.in_channels
        self.psi = {i: CBS(join(name, f"psi{i}"), c[i], w // 2, 1) for i in OUTPUT_LEVELS}
        self.trans: dict[int, list[tuple[str, Trans]]] = {i: [] for i in OUTPUT_LEVELS}
        for i in OUTPUT_LEVELS:
            j = self.CROSS[i]
            self.trans[i].append((f"Pin{j}", Trans(join(name, f"cross{j}to{i}"), j, i, w, w // 2)))
        for s, t in cfg.long_skips:
            self.trans[t].append((f"C{s}", Trans(join(name, f"skip{s}to{t}"), s, t, c[s], w // 2)))

    def children(self):
        out = [self.td] + [self.psi[i] for i in OUTPUT_LEVELS]
        for i in OUTPUT_LEVELS:
            out += [t for _, t in self.trans[i]]
        return out

    def __call__(self, p, feats):
        for src, dst in self.cfg.long_skips:
            if src not in feats:
                raise TopologyError(f"long skip references absent level C{src}")
        P_in = self.td(p, feats)
        out = {}
        for i in sorted(P_in):
            injected = []
            for src, t in self.trans[i]:
                level = int(src[-1])
                source = P_in.get(level) if src.startswith("Pin") else feats[level]
                if source is None:
                    continue
                injected.append(t(p, source))
            lateral = self.psi[i](p, feats[i])
            if injected:
                out[i] = ag.concat_channels([lateral, ag.add_n(injected)])
            else:
                out[i] = ag.concat_channels([lateral, ag.zeros_like(lateral)])
        return out

    def edges(self):
        e = self.td.edges()
        for i in OUTPUT_LEVELS:
            e.append((f"C{i}", f"P{i}", "psi:cbs1x1", self.psi[i].param_count()))
            for src, t in self.trans[i]:
                e.append((src, f"P{i}", "trans:" + t.op, t.param_count()))
        return e

    def check_structure(self):
        """Every output has a lateral input and at least one cross-level input."""
        self.check_acyclic()
        for i in OUTPUT_LEVELS:
            inputs = [(s, op) for s, d, op, _ in self.edges() if d == f"P{i}"]
            if not any(op.startswith("psi") for _, op in inputs):
                raise TopologyError(f"P{i} has no lateral input")
            if not any(op.startswith("trans") for _, op in inputs):
                raise TopologyError(f"P{i} has no cross-level input")
        return True


NECKS = {"topdown-fpn": TopDownFPN, "panet": PANet, "epa-fpn": EPAFPN}


def make_neck(cfg: NeckConfig, name: str = "neck") -> Neck:
    return NECKS[cfg.variant](cfg, name)


def _run(cfg: NeckConfig, C, params) -> PyramidFeatures:
    feats = C.levels if isinstance(C, PyramidFeatures) else dict(C)
    neck = make_neck(cfg)
    out = neck(as_vars(params), {k: ag.Var(v) for k, v in feats.items()})
    return PyramidFeatures({k: v.data for k, v in out.items()})


def build_topdown_fpn(C, params, cfg: NeckConfig | None = None) -> PyramidFeatures:
    cfg = cfg or NeckConfig("topdown-fpn")
    return _run(NeckConfig("topdown-fpn", cfg.width, (), cfg.in_channels), C, params)


def build_panet(C, params, cfg: NeckConfig | None = None) -> PyramidFeatures:
    cfg = cfg or NeckConfig("panet")
    return _run(NeckConfig("panet", cfg.width, (), cfg.in_channels), C, params)


def build_epafpn(C, cfg: NeckConfig, params) -> PyramidFeatures:
    if cfg.variant != "epa-fpn":
        raise ConfigError(f"build_epafpn needs variant epa-fpn, got {cfg.variant}")
    return _run(cfg, C, params)


def count_cost(variant: str | NeckConfig, widths=None, width: int = 64, ref_size: int = 640,
               probe_size: int = 64) -> dict:
    """Exact parameter count and FLOPs (2 x MACs) at a square reference input.

    MACs are traced at ``probe_size`` and scaled by (ref_size / probe_size)^2,
    exact whenever both sizes are multiples of 32.
    """
    if isinstance(variant, NeckConfig):
        cfg = variant
    else:
        in_ch = dict(zip((2, 3, 4, 5), widths)) if widths is not None else dict(DEFAULT_IN_CHANNELS)
        cfg = NeckConfig(variant, width, DEFAULT_LONG_SKIPS, in_ch)
    neck = make_neck(cfg)
    params = neck.init(0)
    n_params = int(sum(a.size for a in params.values()))
    feats = {k: ag.Var(np.zeros((1, c, probe_size // LEVEL_STRIDE[k], probe_size // LEVEL_STRIDE[k])))
             for k, c in cfg.in_channels.items()}
    with ag.count_macs() as records:
        neck(as_vars(params), feats)
    macs = sum(m for _, m in records) * (ref_size * ref_size) // (probe_size * probe_size)
    return {"variant": cfg.variant, "width": cfg.width, "params": n_params, "macs": macs, "flops": 2 * macs}


def conv_cost(spec, h: int, w: int) -> dict:
    return {"params": spec.param_count(), "macs": spec.macs(h, w), "flops": 2 * spec.macs(h, w)}


def graph_dump(cfg: NeckConfig) -> str:
    return json.dumps(make_neck(cfg).graph(), indent=2)
