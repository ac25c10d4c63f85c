"""Geometry and segmentation metrics.

3D: radius-based precision/recall/F1 between predicted and ground-truth point
sets (a point counts when the counterpart set has a neighbor within the
radius; matching is exact, grid-hash accelerated). 2D: mIoU over thresholded
masks and mAP as PR-curve area swept over 256 score thresholds.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError


@dataclass
class F1Report:
    precision: float
    recall: float
    f1: float
    radius: float
    pred_count: int
    gt_count: int
    matched_pred: int
    matched_gt: int
    degenerate: bool = False


def brute_force_matches(query, ref, radius):
    """Oracle matcher: full pairwise distances, chunked."""
    nq = query.shape[0]
    matched = np.zeros(nq, dtype=bool)
    if nq == 0 or ref.shape[0] == 0:
        return matched
    r2 = radius * radius
    for s in range(0, nq, 512):
        d2 = ((query[s:s + 512, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
        matched[s:s + 512] = (d2 <= r2).any(axis=1)
    return matched


def f1_3d(pred, gt, radius):
    """Bidirectional radius matching between point sets."""
    if radius <= 0:
        raise ContractError("radius must be positive")
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] == 0 and gt.shape[0] == 0:
        return F1Report(precision=0.0, recall=0.0, f1=0.0, radius=radius,
                        pred_count=0, gt_count=0, matched_pred=0, matched_gt=0,
                        degenerate=True)
    matched_pred = int(kernels.match_within_radius(pred, gt, radius).sum())
    matched_gt = int(kernels.match_within_radius(gt, pred, radius).sum())
    precision = matched_pred / pred.shape[0] if pred.shape[0] else 0.0
    recall = matched_gt / gt.shape[0] if gt.shape[0] else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) \
        if precision + recall > 0 else 0.0
    return F1Report(precision=precision, recall=recall, f1=f1, radius=radius,
                    pred_count=pred.shape[0], gt_count=gt.shape[0],
                    matched_pred=matched_pred, matched_gt=matched_gt)


@dataclass
class SegReport2D:
    per_query_iou: dict          # query -> mean IoU over views
    miou: float
    mAP: float
    per_view: dict               # query -> list of per-view IoU
    empty_pairs: int
    undefined_ap: int


def iou(pred_mask, gt_mask):
    """|intersection| / |union|; None when the union is empty."""
    if pred_mask.shape != gt_mask.shape:
        raise ContractError("mask shapes differ")
    union = np.logical_or(pred_mask, gt_mask).sum()
    if union == 0:
        return None
    return float(np.logical_and(pred_mask, gt_mask).sum() / union)


def miou_2d(pred_masks, gt_masks):
    """pred_masks/gt_masks: query -> list of per-view boolean masks."""
    if set(pred_masks) != set(gt_masks):
        raise ContractError("query sets differ between predictions and gt")
    per_view = {}
    per_query = {}
    empty = 0
    for q in sorted(pred_masks):
        if len(pred_masks[q]) != len(gt_masks[q]):
            raise ContractError(f"view counts differ for query {q!r}")
        vals = []
        for p, g in zip(pred_masks[q], gt_masks[q]):
            v = iou(np.asarray(p, dtype=bool), np.asarray(g, dtype=bool))
            if v is None:
                empty += 1
            else:
                vals.append(v)
        per_view[q] = vals
        per_query[q] = float(np.mean(vals)) if vals else 0.0
    miou = float(np.mean([per_query[q] for q in per_query])) if per_query else 0.0
    return SegReport2D(per_query_iou=per_query, miou=miou, mAP=0.0,
                       per_view=per_view, empty_pairs=empty, undefined_ap=0)


def average_precision(scores, gt_mask, n_thresholds=256):
    """PR-curve area for one score map against a boolean mask.

    Thresholds sweep [0,1) at `n_thresholds` even levels (tau=0 keeps the
    full-recall endpoint since scores are strictly positive); thresholds with
    no predictions contribute no point. Precision is monotonized (running max
    from high recall toward low) and the curve is extended flat to recall 0
    before trapezoidal integration. Returns None when the mask is empty.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    gt = np.asarray(gt_mask, dtype=bool).ravel()
    if scores.shape != gt.shape:
        raise ContractError("score/mask shapes differ")
    n_pos = int(gt.sum())
    if n_pos == 0:
        return None
    taus = np.arange(n_thresholds) / n_thresholds
    recalls, precisions = [], []
    for tau in taus:
        sel = scores > tau
        npred = int(sel.sum())
        if npred == 0:
            continue
        tp = int((sel & gt).sum())
        recalls.append(tp / n_pos)
        precisions.append(tp / npred)
    if not recalls:
        return 0.0
    recalls = np.array(recalls)
    precisions = np.array(precisions)
    uniq = np.unique(recalls)
    best = np.array([precisions[recalls == r].max() for r in uniq])
    # max-to-the-right: precision at recall r = max precision at recall >= r
    best = np.maximum.accumulate(best[::-1])[::-1]
    if uniq[0] > 0.0:
        uniq = np.concatenate(([0.0], uniq))
        best = np.concatenate(([best[0]], best))
    return float(np.trapezoid(best, uniq))


def map_2d(score_maps, gt_masks, n_thresholds=256):
    """Mean AP over queries; per query, AP is averaged over views.

    score_maps/gt_masks: query -> list of per-view arrays. Queries whose masks
    are empty in every view are excluded and counted.
    """
    if set(score_maps) != set(gt_masks):
        raise ContractError("query sets differ between scores and gt")
    aps = {}
    undefined = 0
    for q in sorted(score_maps):
        vals = []
        for s, g in zip(score_maps[q], gt_masks[q]):
            ap = average_precision(s, g, n_thresholds)
            if ap is not None:
                vals.append(ap)
        if vals:
            aps[q] = float(np.mean(vals))
        else:
            undefined += 1
    mean_ap = float(np.mean(list(aps.values()))) if aps else 0.0
    return mean_ap, aps, undefined
