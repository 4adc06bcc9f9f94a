"""Evaluation metrics: symmetric best Dice, coverage, average precision, counts.

All metrics operate on sets of binary instance masks. Soft predictions are
binarized at 0.5 first. Dataset-level numbers are per-image values averaged
over the corpus.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

AP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


@dataclass
class InstanceSet:
    """Binary masks for one image; predictions also carry confidence scores."""

    masks: list
    scores: list = field(default_factory=list)

    def __post_init__(self):
        self.masks = [np.asarray(m) for m in self.masks]
        if self.scores and len(self.scores) != len(self.masks):
            raise ValueError(f"{len(self.scores)} scores for {len(self.masks)} masks")

    @property
    def count(self) -> int:
        return len(self.masks)


@dataclass
class MetricReport:
    sbd: float
    mwcov: float
    mucov: float
    ap: float
    ap50: float
    dic_abs: float
    avg_fp: float
    avg_fn: float

    def to_json(self) -> str:
        return json.dumps({k: float(v) for k, v in asdict(self).items()}, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        return MetricReport(**json.loads(text))


def binarize(mask: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(mask) >= threshold


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A and B| / (|A| + |B|) for binary masks."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        raise ValueError("dice of two empty masks is undefined")
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    return int(np.logical_and(a, b).sum()) / union


def _best_dice(from_masks, to_masks) -> float:
    """Mean over from_masks of the best Dice against any mask in to_masks."""
    # exactly-rounded sum keeps the result bit-identical under instance reordering
    best = [max(dice(a, b) for b in to_masks) for a in from_masks]
    return math.fsum(best) / len(best)


def sbd(pred: InstanceSet, gt: InstanceSet) -> float:
    """Symmetric best Dice: the worse of the two directional mean best-Dice values."""
    if pred.count == 0 or gt.count == 0:
        return 0.0
    return min(_best_dice(gt.masks, pred.masks), _best_dice(pred.masks, gt.masks))


def coverage(pred: InstanceSet, gt: InstanceSet, weighted: bool) -> float:
    """Best IoU per ground-truth instance, averaged plainly or by instance area."""
    if gt.count == 0:
        return 0.0
    if pred.count == 0:
        return 0.0
    areas = np.array([int(np.asarray(m, dtype=bool).sum()) for m in gt.masks], dtype=np.float64)
    best = np.array([max(mask_iou(p, g) for p in pred.masks) for g in gt.masks])
    # exactly-rounded sums keep the result bit-identical under instance reordering
    if weighted:
        return math.fsum(areas * best) / float(areas.sum())
    return math.fsum(best) / len(best)


def _mask_key(m: np.ndarray):
    # Content-based tiebreak so instance order in the input lists never matters
    m = np.asarray(m, dtype=bool)
    return int(m.sum()), m.tobytes()


def _precision_greedy(pred: InstanceSet, gt: InstanceSet, threshold: float) -> float:
    if pred.count == 0:
        return 0.0
    if pred.scores:
        order = sorted(range(pred.count), key=lambda i: (-pred.scores[i],) + _mask_key(pred.masks[i]))
    else:
        order = list(range(pred.count))
    gt_keys = [_mask_key(g) for g in gt.masks]
    taken = [False] * gt.count
    tp = 0
    for i in order:
        best_j, best_iou = -1, 0.0
        for j in range(gt.count):
            if taken[j]:
                continue
            iou = mask_iou(pred.masks[i], gt.masks[j])
            if iou > best_iou or (iou == best_iou and best_j >= 0 and gt_keys[j] < gt_keys[best_j]):
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= threshold:
            taken[best_j] = True
            tp += 1
    return tp / pred.count


def _precision_exhaustive(pred: InstanceSet, gt: InstanceSet, threshold: float) -> float:
    """Max over injective assignments; tractable cross-check for small sets."""
    if pred.count == 0:
        return 0.0
    if gt.count == 0:
        return 0.0
    if max(pred.count, gt.count) > 6:
        raise ValueError("exhaustive precision is limited to 6 instances")
    iou = np.array([[mask_iou(p, g) for g in gt.masks] for p in pred.masks])
    hits = iou >= threshold
    best = 0
    if pred.count <= gt.count:
        for cols in itertools.permutations(range(gt.count), pred.count):
            best = max(best, sum(1 for i, j in enumerate(cols) if hits[i, j]))
    else:
        for rows in itertools.permutations(range(pred.count), gt.count):
            best = max(best, sum(1 for j, i in enumerate(rows) if hits[i, j]))
    return best / pred.count


def average_precision(pred: InstanceSet, gt: InstanceSet, thresholds=AP_THRESHOLDS, exhaustive=False):
    """Mean precision over IoU thresholds, plus the value at threshold 0.5."""
    fn = _precision_exhaustive if exhaustive else _precision_greedy
    values = [fn(pred, gt, th) for th in thresholds]
    ap = float(np.mean(values))
    ap50 = float(fn(pred, gt, 0.5))
    return ap, ap50


def counting_metrics(preds, gts):
    """Mean |count difference|, zero-overlap false positives and false negatives."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} ground-truth sets")
    dic, fp, fn = [], [], []
    for p, g in zip(preds, gts):
        dic.append(abs(p.count - g.count))
        fp.append(sum(1 for pm in p.masks if all(not np.logical_and(pm, gm).any() for gm in g.masks)))
        fn.append(sum(1 for gm in g.masks if all(not np.logical_and(pm, gm).any() for pm in p.masks)))
    n = max(len(preds), 1)
    return sum(dic) / n, sum(fp) / n, sum(fn) / n


def evaluate_dataset(preds, gts, thresholds=AP_THRESHOLDS) -> MetricReport:
    """Per-image metrics averaged over the corpus."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} ground-truth sets")
    if not preds:
        raise ValueError("empty evaluation corpus")
    sbds, mw, mu, aps, ap50s = [], [], [], [], []
    for p, g in zip(preds, gts):
        sbds.append(sbd(p, g))
        mw.append(coverage(p, g, weighted=True))
        mu.append(coverage(p, g, weighted=False))
        a, a50 = average_precision(p, g, thresholds)
        aps.append(a)
        ap50s.append(a50)
    dic, fp, fn = counting_metrics(preds, gts)
    return MetricReport(
        sbd=float(np.mean(sbds)),
        mwcov=float(np.mean(mw)),
        mucov=float(np.mean(mu)),
        ap=float(np.mean(aps)),
        ap50=float(np.mean(ap50s)),
        dic_abs=float(dic),
        avg_fp=float(fp),
        avg_fn=float(fn),
    )
