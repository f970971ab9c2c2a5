"""Detection boxes, IoU and greedy non-maximum suppression."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

from ..errors import ConfigError


@dataclass(frozen=True)
class DetectionBox:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0
    cls: int = 0

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ConfigError(f"degenerate box {self.coords}")
        if not math.isfinite(self.score):
            raise ConfigError("box score must be finite")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d) -> "DetectionBox":
        if isinstance(d, dict):
            return cls(d["x1"], d["y1"], d["x2"], d["y2"], d.get("score", 1.0), d.get("cls", 0))
        return cls(*d)


def _coords(b) -> tuple[float, float, float, float]:
    if isinstance(b, DetectionBox):
        return b.coords
    x1, y1, x2, y2 = (float(v) for v in b[:4])
    if not (x1 < x2 and y1 < y2):
        raise ValueError(f"degenerate box {(x1, y1, x2, y2)}")
    return x1, y1, x2, y2


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = _coords(a)
    bx1, by1, bx2, by2 = _coords(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def nms(boxes: Sequence[DetectionBox], iou_threshold: float = 0.5) -> list[DetectionBox]:
    """Greedy suppression in descending score order, ties broken by input index.

    A box is suppressed when its IoU with a kept box is >= the threshold.
    """
    order = sorted(range(len(boxes)), key=lambda k: (-boxes[k].score, k))
    kept: list[DetectionBox] = []
    for k in order:
        b = boxes[k]
        if all(iou(b, other) < iou_threshold for other in kept):
            kept.append(b)
    return kept
