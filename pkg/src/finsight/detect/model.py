"""Toy single-class detector: strided backbone, pluggable neck and bottleneck,
anchor-free grid head.

Each head cell predicts (objectness, tx, ty, tw, th). A ground-truth box is
assigned to the pyramid level chosen by its longest side and to the cell
holding its centre; the centre offset inside that cell is sigmoid(tx/ty) and
the size is stride * exp(tw/th).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..epafpn import LEVEL_STRIDE, NeckConfig, OUTPUT_LEVELS, canonical_variant, make_neck
from ..errors import ConfigError
from ..msddsp import MsDdsp, MsDdspConfig
from ..nn import CBS, Conv, Layer, as_vars, join
from ..tensor import autograd as ag
from ..tensor import functional as F
from .boxes import DetectionBox, nms

BOTTLENECKS = ("standard", "msddsp")
# longest box side at or below which a box is assigned to P3 / P4; larger go to P5
LEVEL_LIMITS = {3: 24.0, 4: 48.0}
OBJ_PRIOR = 0.02


@dataclass(frozen=True)
class Arch:
    neck: str = "epa-fpn"
    bottleneck: str = "msddsp"
    neck_width: int = 32
    widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    disabled_branches: tuple[int, ...] = ()
    long_skips: tuple[tuple[int, int], ...] = ((2, 4), (3, 5))

    def __post_init__(self):
        object.__setattr__(self, "neck", canonical_variant(self.neck))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "disabled_branches", tuple(sorted(int(b) for b in self.disabled_branches)))
        object.__setattr__(self, "long_skips", tuple(tuple(int(v) for v in e) for e in self.long_skips))
        if self.bottleneck not in BOTTLENECKS:
            raise ConfigError(f"unknown bottleneck {self.bottleneck!r}; choose from {BOTTLENECKS}")
        if self.disabled_branches and self.bottleneck != "msddsp":
            raise ConfigError("disabled_branches only applies to the msddsp bottleneck")
        if len(self.widths) != 4:
            raise ConfigError("backbone needs four stage widths")

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["disabled_branches"] = list(self.disabled_branches)
        d["long_skips"] = [list(e) for e in self.long_skips]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Arch":
        return cls(**{k: (tuple(tuple(e) for e in v) if k == "long_skips" else v) for k, v in d.items()})


class Backbone(Layer):
    """Stem plus four stride-2 stages producing C2..C5 (strides 4..32)."""

    def __init__(self, widths, name="backbone"):
        self.name = name
        w2, w3, w4, w5 = widths
        self.stem = CBS(join(name, "stem"), 3, w2 // 2, 3, stride=2)
        self.stages = {
            2: [CBS(join(name, "s2.down"), w2 // 2, w2, 3, stride=2)],
            3: [CBS(join(name, "s3.down"), w2, w3, 3, stride=2), CBS(join(name, "s3.conv"), w3, w3, 3)],
            4: [CBS(join(name, "s4.down"), w3, w4, 3, stride=2), CBS(join(name, "s4.conv"), w4, w4, 3)],
            5: [CBS(join(name, "s5.down"), w4, w5, 3, stride=2)],
        }

    def children(self):
        return [self.stem] + [layer for k in (2, 3, 4, 5) for layer in self.stages[k]]

    def __call__(self, p, x):
        y = self.stem(p, x)
        feats = {}
        for k in (2, 3, 4, 5):
            for layer in self.stages[k]:
                y = layer(p, y)
            feats[k] = y
        return feats


class StandardBottleneck(Layer):
    def __init__(self, name, c):
        self.name = name
        self.cv1 = CBS(join(name, "cv1"), c, c, 3)
        self.cv2 = CBS(join(name, "cv2"), c, c, 3)

    def children(self):
        return [self.cv1, self.cv2]

    def __call__(self, p, x):
        return self.cv2(p, self.cv1(p, x))


class Residual(Layer):
    def __init__(self, block):
        self.block = block
        self.name = block.name

    def children(self):
        return [self.block]

    def __call__(self, p, x):
        return ag.add(x, self.block(p, x))


class Head(Layer):
    def __init__(self, name, c):
        self.name = name
        self.conv = Conv(join(name, "pred"), c, 5, 1)

    def children(self):
        return [self.conv]

    def own_params(self, rng, dtype):
        return {}

    def init(self, rng=0, dtype=np.float64):
        p = super().init(rng, dtype)
        b = np.zeros(5, dtype=dtype)
        b[0] = math.log(OBJ_PRIOR / (1 - OBJ_PRIOR))
        p[join(self.conv.name, "b")] = b
        return p

    def __call__(self, p, x):
        return self.conv(p, x)


class Detector(Layer):
    def __init__(self, arch: Arch):
        self.arch = arch
        self.name = ""
        w = arch.neck_width
        self.backbone = Backbone(arch.widths)
        self.neck = make_neck(NeckConfig(arch.neck, w, arch.long_skips, dict(zip((2, 3, 4, 5), arch.widths))))
        if arch.bottleneck == "msddsp":
            cfg = MsDdspConfig(w, disabled_branches=frozenset(arch.disabled_branches))
            self.blocks = {i: Residual(MsDdsp(cfg, f"bneck{i}")) for i in OUTPUT_LEVELS}
        else:
            self.blocks = {i: Residual(StandardBottleneck(f"bneck{i}", w)) for i in OUTPUT_LEVELS}
        self.heads = {i: Head(f"head{i}", w) for i in OUTPUT_LEVELS}

    def children(self):
        return [self.backbone, self.neck] + [self.blocks[i] for i in OUTPUT_LEVELS] + \
               [self.heads[i] for i in OUTPUT_LEVELS]

    def features(self, p, x):
        C = self.backbone(p, x)
        return {i: self.blocks[i](p, P) for i, P in self.neck(p, C).items()}

    def __call__(self, p, x) -> dict[int, ag.Var]:
        return {i: self.heads[i](p, P) for i, P in self.features(p, x).items()}


def head_input_shapes(arch: Arch, size: int = 96) -> dict[int, tuple]:
    det = Detector(arch)
    p = as_vars(det.init(0))
    feats = det.features(p, ag.Var(np.zeros((1, 3, size, size))))
    return {i: v.data.shape for i, v in feats.items()}


# --- targets, loss, decoding -------------------------------------------------

def assign_level(box) -> int:
    side = max(box[2] - box[0], box[3] - box[1])
    for level in (3, 4):
        if side <= LEVEL_LIMITS[level]:
            return level
    return 5


def build_targets(boxes_per_image, size: int) -> dict[int, dict[str, np.ndarray]]:
    n = len(boxes_per_image)
    targets = {}
    for level in OUTPUT_LEVELS:
        g = size // LEVEL_STRIDE[level]
        targets[level] = {"obj": np.zeros((n, g, g)), "box": np.zeros((n, 4, g, g)), "area": np.zeros((n, g, g))}
    for k, boxes in enumerate(boxes_per_image):
        for b in boxes:
            x1, y1, x2, y2 = (float(v) for v in b[:4])
            level = assign_level((x1, y1, x2, y2))
            s = LEVEL_STRIDE[level]
            t = targets[level]
            g = t["obj"].shape[1]
            cx, cy = (x1 + x2) / 2 / s, (y1 + y2) / 2 / s
            gx, gy = min(int(cx), g - 1), min(int(cy), g - 1)
            area = (x2 - x1) * (y2 - y1)
            # one box per cell; the larger box wins a collision
            if t["obj"][k, gy, gx] and t["area"][k, gy, gx] >= area:
                continue
            t["obj"][k, gy, gx] = 1.0
            t["area"][k, gy, gx] = area
            t["box"][k, :, gy, gx] = (cx - gx, cy - gy, math.log((x2 - x1) / s), math.log((y2 - y1) / s))
    return targets


def detection_loss(outputs: dict[int, ag.Var], targets, box_weight: float = 1.0) -> ag.Var:
    """Objectness BCE over every cell plus L1 box error on positive cells.

    Both sums are divided by the number of images in the batch.
    """
    n = next(iter(outputs.values())).data.shape[0]
    total = 0.0
    grads = {}
    for level, out in outputs.items():
        o = out.data
        t = targets[level]
        logit = o[:, 0]
        y = t["obj"]
        bce = np.maximum(logit, 0) - logit * y + np.logaddexp(0, -np.abs(logit))
        g = np.zeros_like(o)
        g[:, 0] = (F.sigmoid(logit) - y) / n
        pos = y > 0
        sxy = F.sigmoid(o[:, 1:3])
        pred = np.concatenate([sxy, o[:, 3:5]], axis=1)
        diff = pred - t["box"]
        l1 = np.abs(diff) * pos[:, None]
        sign = np.sign(diff) * pos[:, None] * box_weight / n
        g[:, 1:3] = sign[:, :2] * sxy * (1 - sxy)
        g[:, 3:5] = sign[:, 2:]
        total += (bce.sum() + box_weight * l1.sum()) / n
        grads[level] = g.astype(o.dtype)
    levels = list(outputs)

    def backward(gr):
        for level in levels:
            if outputs[level].requires_grad:
                outputs[level]._accumulate(grads[level] * gr)

    return ag.Var(np.asarray(total), [outputs[l] for l in levels], backward)


def decode(outputs: dict[int, np.ndarray], size: int, score_thr: float = 0.05,
           iou_thr: float = 0.5, max_det: int = 100) -> list[list[DetectionBox]]:
    n = next(iter(outputs.values())).shape[0]
    results = []
    for k in range(n):
        cands = []
        for level in sorted(outputs):
            o = np.asarray(outputs[level][k], dtype=np.float64)
            s = LEVEL_STRIDE[level]
            score = F.sigmoid(o[0])
            ys, xs = np.nonzero(score >= score_thr)
            for gy, gx in zip(ys, xs):
                cx = (gx + F.sigmoid(o[1, gy, gx])) * s
                cy = (gy + F.sigmoid(o[2, gy, gx])) * s
                w = s * math.exp(float(np.clip(o[3, gy, gx], -8, 8)))
                h = s * math.exp(float(np.clip(o[4, gy, gx], -8, 8)))
                x1, y1 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
                x2, y2 = min(float(size), cx + w / 2), min(float(size), cy + h / 2)
                if x1 < x2 and y1 < y2:
                    cands.append(DetectionBox(x1, y1, x2, y2, float(score[gy, gx]), 0))
        results.append(nms(cands, iou_thr)[:max_det])
    return results


def model_forward(image, arch: Arch, params, score_thr: float = 0.05) -> list[DetectionBox]:
    """Detect fish in one (3, H, W) image normalised to [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[None]
    if img.min() < 0 or img.max() > 1:
        raise ConfigError("image must be normalised to [0, 1]")
    det = Detector(arch)
    out = det(as_vars(params), ag.Var(img.astype(next(iter(params.values())).dtype)))
    return decode({k: v.data for k, v in out.items()}, img.shape[-1], score_thr)[0]


def predict(det: Detector, params, images: np.ndarray, score_thr: float = 0.05, batch: int = 32):
    pv = as_vars(params)
    dtype = next(iter(params.values())).dtype
    preds = []
    for lo in range(0, len(images), batch):
        x = ag.Var(np.asarray(images[lo : lo + batch], dtype=dtype))
        out = det(pv, x)
        preds.extend(decode({k: v.data for k, v in out.items()}, images.shape[-1], score_thr))
    return preds
