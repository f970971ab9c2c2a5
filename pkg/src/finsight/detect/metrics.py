"""Single-class precision / recall / F1 / AP at a fixed IoU threshold.

Matching is done per image: predictions are visited by descending score
(equal scores ordered by box coordinates, so input order never matters) and
each one takes the unmatched ground truth with the highest IoU, provided it
reaches the threshold. The precision-recall curve gets one point per
distinct score, so tied predictions enter together. AP is the area under
the monotone precision envelope over all recall points.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import DetectionBox, iou


@dataclass
class EvalResult:
    precision: float
    recall: float
    f1: float
    map50: float
    matches: list = field(default_factory=list)
    n_gt: int = 0
    n_pred: int = 0

    def to_json(self, with_matches: bool = True) -> dict:
        out = {"precision": self.precision, "recall": self.recall, "f1": self.f1, "map50": self.map50,
               "n_gt": self.n_gt, "n_pred": self.n_pred}
        if with_matches:
            out["matches"] = self.matches
        return out


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def match_image(preds: Sequence[DetectionBox], gts: Sequence, iou_thr: float = 0.5) -> list[dict]:
    order = sorted(range(len(preds)), key=lambda k: (-preds[k].score, preds[k].coords))
    taken = [False] * len(gts)
    records = []
    for k in order:
        best, best_iou = -1, iou_thr
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            v = iou(preds[k], gt)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = g, v
        if best >= 0:
            taken[best] = True
        records.append({"pred": k, "score": preds[k].score, "gt": best, "tp": best >= 0,
                        "iou": best_iou if best >= 0 else 0.0})
    return records


def average_precision(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0 or scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order].astype(np.float64)
    ctp = np.cumsum(tp)
    # one PR point at the end of each run of equal scores
    last = np.r_[scores[1:] != scores[:-1], True]
    ctp = ctp[last]
    npred = np.flatnonzero(last) + 1
    recall = ctp / n_gt
    precision = ctp / npred
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * envelope))


def evaluate_map(preds: Sequence[Sequence[DetectionBox]], gts: Sequence[Sequence], iou_thr: float = 0.5) -> EvalResult:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists for {len(gts)} images")
    scores, tps, matches = [], [], []
    n_gt = sum(len(g) for g in gts)
    for img, (p, g) in enumerate(zip(preds, gts)):
        recs = match_image(p, g, iou_thr)
        for r in recs:
            r["image"] = img
        matches.extend(recs)
        scores.extend(r["score"] for r in recs)
        tps.extend(r["tp"] for r in recs)
    scores_a, tps_a = np.asarray(scores, dtype=np.float64), np.asarray(tps, dtype=bool)
    n_tp = int(tps_a.sum())
    n_pred = len(scores)
    precision = n_tp / n_pred if n_pred else 0.0
    recall = n_tp / n_gt if n_gt else 0.0
    ap = average_precision(scores_a, tps_a, n_gt)
    return EvalResult(precision, recall, f1_score(precision, recall), ap, matches, n_gt, n_pred)
