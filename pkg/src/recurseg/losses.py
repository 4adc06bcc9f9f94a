"""Training losses: matched segmentation IoU, soft box IoU, monotonic score loss.

Predictions are matched to ground-truth instances once per episode by
maximum-weight bipartite matching on soft IoU; the same matching drives all
three losses. Gradients never flow through the matching itself.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import attention as at
from . import autodiff as ad
from .autodiff import ShapeError, Tensor

IOU_EPS = 1e-8
SCORE_EPS = 1e-7


@dataclass
class LossConfig:
    lambda_b: float = 1.0
    lambda_s: float = 1.0
    box_pad_factor: float = 1.2
    beta: float = 5.0

    def __post_init__(self):
        if self.lambda_b < 0 or self.lambda_s < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class Matching:
    """Injective prediction-to-ground-truth assignment of maximal total weight."""

    assignment: dict[int, int]
    total_weight: float
    n_pred: int
    n_gt: int

    def matched_gt(self, pred_index: int):
        return self.assignment.get(pred_index)


def soft_iou(a: Tensor, b: Tensor) -> Tensor:
    """Sum(a*b) / Sum(a + b - a*b) for masks in [0,1]; 0 if both masks are empty."""
    if a.shape != b.shape:
        raise ShapeError(f"soft_iou: shape mismatch {a.shape} vs {b.shape}")
    prod = a * b
    inter = ad.sum_(prod)
    union = ad.sum_(a + b - prod)
    if float(union.value) == 0.0:
        warnings.warn("soft_iou of two empty masks, defining it as 0")
    return inter / ad.maximum(union, ad.constant(IOU_EPS))


def soft_iou_value(a: np.ndarray, b: np.ndarray) -> float:
    """Plain-array soft IoU used when building the match matrix."""
    prod = a * b
    union = (a + b - prod).sum()
    return float(prod.sum() / max(union, IOU_EPS))


def _min_cost_assignment(cost: np.ndarray) -> list[int]:
    """O(n^3) Hungarian method on a square cost matrix via dual potentials.

    Returns column assigned to each row.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=int)  # 0 = unassigned, else row index + 1
    prev_col = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        min_to_col = np.full(n + 1, math.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            delta = math.inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < min_to_col[j]:
                    min_to_col[j] = cur
                    prev_col[j] = j0
                if min_to_col[j] < delta:
                    delta = min_to_col[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[row_of_col[j]] += delta
                    v[j] -= delta
                else:
                    min_to_col[j] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = prev_col[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    assign = [0] * n
    for j in range(1, n + 1):
        if row_of_col[j]:
            assign[row_of_col[j] - 1] = j - 1
    return assign


def hungarian(weights: np.ndarray) -> Matching:
    """Maximum-weight assignment; rectangular inputs padded with zero dummies."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise ShapeError(f"hungarian: weight matrix must be 2d, got shape {weights.shape}")
    if not np.all(np.isfinite(weights)):
        raise ValueError("hungarian: non-finite weights")
    n_pred, n_gt = weights.shape
    if n_pred == 0 or n_gt == 0:
        return Matching(assignment={}, total_weight=0.0, n_pred=n_pred, n_gt=n_gt)
    n = max(n_pred, n_gt)
    padded = np.zeros((n, n))
    padded[:n_pred, :n_gt] = weights
    assign = _min_cost_assignment(-padded)

    pairs = {i: assign[i] for i in range(n_pred) if assign[i] < n_gt}
    # rows parked on dummy columns pair with leftover real columns; by
    # optimality those entries carry zero weight, and adding them keeps the
    # assignment at full size min(n_pred, n_gt)
    free_rows = [i for i in range(n_pred) if i not in pairs]
    free_cols = [j for j in range(n_gt) if j not in pairs.values()]
    for i, j in zip(free_rows, free_cols):
        pairs[i] = j
    total = float(sum(weights[i, j] for i, j in pairs.items()))
    return Matching(assignment=pairs, total_weight=total, n_pred=n_pred, n_gt=n_gt)


def build_match_matrix(pred_masks, gt_masks) -> np.ndarray:
    """Soft IoU of every prediction/ground-truth pair, as plain floats."""
    m = np.zeros((len(pred_masks), len(gt_masks)))
    for i, p in enumerate(pred_masks):
        pv = np.asarray(p.value if isinstance(p, Tensor) else p, dtype=np.float64).reshape(-1)
        for j, g in enumerate(gt_masks):
            gv = np.asarray(g, dtype=np.float64).reshape(-1)
            m[i, j] = soft_iou_value(pv, gv)
    return m


def match_predictions(pred_masks, gt_masks) -> Matching:
    return hungarian(build_match_matrix(pred_masks, gt_masks))


def matching_iou_loss(pred_masks, gt_masks, matching: Matching | None = None) -> Tensor:
    """Negative mean soft IoU over matched pairs, normalized by ground-truth count."""
    n_gt = len(gt_masks)
    if n_gt == 0:
        return ad.constant(0.0)
    if matching is None:
        matching = match_predictions(pred_masks, gt_masks)
    total = ad.constant(0.0)
    for i, j in matching.assignment.items():
        gt = ad.constant(np.asarray(gt_masks[j], dtype=np.float64))
        total = total + soft_iou(pred_masks[i], ad.reshape(gt, pred_masks[i].shape))
    return -(total / float(n_gt))


def pad_box(gt_mask: np.ndarray, factor: float = 1.2):
    """Tight box of a mask scaled about its center, in continuous edge coords.

    Returns (y0, x0, y1, x1); pixel r,c covers [r-0.5, r+0.5] x [c-0.5, c+0.5],
    so a mask spanning rows rmin..rmax has tight edges rmin-0.5 and rmax+0.5.
    Clipped to the image extent.
    """
    gt_mask = np.asarray(gt_mask)
    rows = np.any(gt_mask > 0, axis=1)
    cols = np.any(gt_mask > 0, axis=0)
    if not rows.any():
        raise ValueError("pad_box: empty mask")
    h_img, w_img = gt_mask.shape
    rmin, rmax = np.where(rows)[0][[0, -1]]
    cmin, cmax = np.where(cols)[0][[0, -1]]
    cy, cx = (rmin + rmax) / 2.0, (cmin + cmax) / 2.0
    hh = (rmax - rmin + 1) * factor / 2.0
    hw = (cmax - cmin + 1) * factor / 2.0
    return (
        max(-0.5, cy - hh),
        max(-0.5, cx - hw),
        min(h_img - 0.5, cy + hh),
        min(w_img - 0.5, cx + hw),
    )


def render_box(box, img_h: int, img_w: int) -> np.ndarray:
    """Binary mask of pixels whose centers fall inside continuous box edges."""
    y0, x0, y1, x1 = box
    r = np.arange(img_h).reshape(-1, 1)
    c = np.arange(img_w).reshape(1, -1)
    return ((r >= y0) & (r <= y1) & (c >= x0) & (c <= x1)).astype(np.float64)


def soft_box_iou_loss(
    boxes,
    gt_masks,
    matching: Matching,
    geom: at.PatchGeometry,
    img_h: int,
    img_w: int,
    cfg: LossConfig,
) -> Tensor:
    """Negative mean soft IoU between rendered soft boxes and padded gt boxes.

    `boxes` are denormalized per-step boxes; each matched one is rendered with
    its own magnification through the attention window mask, so the gradient
    reaches the box parameters even when the boxes are disjoint.
    """
    n_gt = len(gt_masks)
    if n_gt == 0:
        return ad.constant(0.0)
    total = ad.constant(0.0)
    for i, j in matching.assignment.items():
        fb = at.build_filterbank(boxes[i], geom, img_h, img_w)
        soft = at.box_mask(fb, boxes[i].gamma, cfg.beta)
        hard = render_box(pad_box(gt_masks[j], cfg.box_pad_factor), img_h, img_w)
        total = total + soft_iou(soft, ad.constant(hard.reshape(img_h, img_w, 1)))
    return -(total / float(n_gt))


def monotonic_score_loss(scores, s_star) -> Tensor:
    """Cross-entropy against running score bounds, averaged over steps.

    Positive targets see the minimum of all scores so far, negative targets
    the maximum of all scores to come: any non-monotonicity hurts twice.
    """
    t_len = len(scores)
    if t_len != len(s_star):
        raise ShapeError(f"scores and targets differ in length: {t_len} vs {len(s_star)}")
    if t_len == 0:
        return ad.constant(0.0)
    clamped = [ad.clip(s, SCORE_EPS, 1.0 - SCORE_EPS) for s in scores]
    prefix_min = [clamped[0]]
    for s in clamped[1:]:
        prefix_min.append(ad.minimum(prefix_min[-1], s))
    suffix_max = [None] * t_len
    suffix_max[-1] = clamped[-1]
    for t in range(t_len - 2, -1, -1):
        suffix_max[t] = ad.maximum(suffix_max[t + 1], clamped[t])
    total = ad.constant(0.0)
    for t in range(t_len):
        if s_star[t]:
            total = total - ad.log(prefix_min[t])
        else:
            total = total - ad.log(1.0 - suffix_max[t])
    return total / float(t_len)


def score_targets(matching: Matching, t_len: int) -> np.ndarray:
    """Target 1 for steps matched to a ground-truth instance, else 0."""
    s_star = np.zeros(t_len, dtype=np.int64)
    for i in matching.assignment:
        s_star[i] = 1
    return s_star


def joint_loss(
    pred_masks,
    boxes,
    scores,
    gt_masks,
    cfg: LossConfig,
    geom: at.PatchGeometry,
    img_h: int,
    img_w: int,
):
    """Total loss; the matching is computed once and shared by all three terms.

    Returns (loss, parts, matching) with parts holding the three scalars.
    """
    matching = match_predictions(pred_masks, gt_masks)
    l_y = matching_iou_loss(pred_masks, gt_masks, matching)
    l_b = soft_box_iou_loss(boxes, gt_masks, matching, geom, img_h, img_w, cfg)
    l_s = monotonic_score_loss(scores, score_targets(matching, len(scores)))
    total = l_y + cfg.lambda_b * l_b + cfg.lambda_s * l_s
    parts = {"seg_iou": l_y, "box_iou": l_b, "score": l_s}
    return total, parts, matching
