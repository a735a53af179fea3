"""Class-agnostic instance-segmentation metrics and scene-flow metrics.

Segmentation metrics (all in percent): AP averaged over IoU thresholds
0.50:0.05:0.95, panoptic quality, F1/precision/recall at IoU > 0.5,
Hungarian-matched mean IoU over ground-truth instances, and the Rand index.
Labels are treated purely as instance ids; any relabeling of either argument
leaves every metric unchanged. Background is just another instance unless
``ignore_background`` removes label 0.

Flow metrics: mean end-point error plus the strict/relaxed accuracy and
outlier percentages at the conventional thresholds (0.05/5 percent,
0.1/10 percent, 0.3/10 percent).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import DimensionMismatch
from .validation import check_labels


@dataclass(frozen=True)
class SegMetrics:
    ap: float
    pq: float
    f1: float
    precision: float
    recall: float
    miou: float
    ri: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class FlowMetrics:
    epe3d: float  # scene units (the common convention reports this x100)
    accs: float
    accr: float
    outlier: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_AP_THRESHOLDS = np.arange(0.50, 0.951, 0.05)
_AP_RECALL_GRID = np.linspace(0.0, 1.0, 101)


def _instances(labels: np.ndarray) -> list[np.ndarray]:
    return [labels == v for v in np.unique(labels)]


def _iou_matrix(gt_sets: list[np.ndarray], pred_sets: list[np.ndarray]) -> np.ndarray:
    iou = np.zeros((len(gt_sets), len(pred_sets)))
    for i, g in enumerate(gt_sets):
        gsum = g.sum()
        for j, p in enumerate(pred_sets):
            inter = np.logical_and(g, p).sum()
            if inter:
                iou[i, j] = inter / (gsum + p.sum() - inter)
    return iou


def _rand_index(gt: np.ndarray, pred: np.ndarray) -> float:
    """Pair-counting agreement via the contingency table."""
    n = gt.shape[0]
    if n < 2:
        return 1.0
    _, gi = np.unique(gt, return_inverse=True)
    _, pi = np.unique(pred, return_inverse=True)
    table = np.zeros((gi.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (gi, pi), 1)

    def pairs(x):
        return (x * (x - 1) // 2).sum()

    total = n * (n - 1) // 2
    same_both = pairs(table)
    same_gt = pairs(table.sum(axis=1))
    same_pred = pairs(table.sum(axis=0))
    agree = total + 2 * same_both - same_gt - same_pred
    return agree / total


def _average_precision(
    iou: np.ndarray, confidences: np.ndarray, n_gt: int
) -> float:
    """COCO-style AP: greedy confidence-ranked matching, 101-point interp."""
    order = np.argsort(-confidences, kind="stable")
    aps = []
    for thr in _AP_THRESHOLDS:
        gt_used = np.zeros(n_gt, dtype=bool)
        tp = np.zeros(len(order))
        for rank, j in enumerate(order):
            cand = np.where(~gt_used & (iou[:, j] >= thr))[0]
            if cand.size:
                best = cand[np.argmax(iou[cand, j])]
                gt_used[best] = True
                tp[rank] = 1.0
        cum_tp = np.cumsum(tp)
        recall = cum_tp / n_gt
        precision = cum_tp / np.arange(1, len(order) + 1)
        # precision envelope sampled on the standard 101-recall grid
        env = np.maximum.accumulate(precision[::-1])[::-1]
        ap = 0.0
        for r in _AP_RECALL_GRID:
            above = recall >= r
            ap += env[above].max(initial=0.0)
        aps.append(ap / len(_AP_RECALL_GRID))
    return float(np.mean(aps))


def seg_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    pred_masks: np.ndarray | None = None,
    ignore_background: bool = False,
) -> SegMetrics:
    """Instance metrics between integer label arrays of equal length.

    ``pred_masks`` (N, K soft masks) supplies AP confidence scores as the
    mean soft probability over each predicted instance; without it all
    instances share one confidence and the PR curve has a single point.
    With ``ignore_background``, points labeled 0 in gt are dropped before
    anything is computed (label 0 otherwise counts as one object).
    """
    pred = check_labels(pred, name="pred")
    gt = check_labels(gt, name="gt")
    if pred.shape[0] != gt.shape[0]:
        raise DimensionMismatch(
            f"pred has {pred.shape[0]} entries but gt has {gt.shape[0]}"
        )
    if pred_masks is not None:
        pred_masks = np.asarray(pred_masks, dtype=np.float64)
        if pred_masks.shape[0] != pred.shape[0]:
            raise DimensionMismatch("pred_masks rows must match pred")
    if ignore_background:
        keep = gt != 0
        pred = pred[keep]
        gt = gt[keep]
        if pred_masks is not None:
            pred_masks = pred_masks[keep]

    if gt.shape[0] == 0:
        full = 100.0 if pred.shape[0] == 0 else 0.0
        return SegMetrics(full, full, full, full, full, full, full)

    gt_sets = _instances(gt)
    pred_sets = _instances(pred)
    iou = _iou_matrix(gt_sets, pred_sets)

    # Unique matching at IoU > 0.5 (at most one partner either way).
    matched = iou > 0.5
    tp = int(matched.sum())
    fp = len(pred_sets) - tp
    fn = len(gt_sets) - tp
    precision = tp / len(pred_sets)
    recall = tp / len(gt_sets)
    f1 = 2 * precision * recall / (precision + recall) if tp else 0.0
    pq = iou[matched].sum() / (tp + fp / 2 + fn / 2)

    # Hungarian-matched mean IoU over ground-truth instances.
    rows, cols = linear_sum_assignment(-iou)
    miou = iou[rows, cols].sum() / len(gt_sets)

    if pred_masks is not None:
        pred_values = np.unique(pred)
        conf = np.empty(len(pred_sets))
        for j, v in enumerate(pred_values):
            sel = pred == v
            col = v if 0 <= v < pred_masks.shape[1] else None
            conf[j] = pred_masks[sel, col].mean() if col is not None else 1.0
    else:
        conf = np.ones(len(pred_sets))
    ap = _average_precision(iou, conf, len(gt_sets))

    ri = _rand_index(gt, pred)
    return SegMetrics(
        ap=float(100 * ap),
        pq=float(100 * pq),
        f1=float(100 * f1),
        precision=float(100 * precision),
        recall=float(100 * recall),
        miou=float(100 * miou),
        ri=float(100 * ri),
    )


def flow_metrics(pred: np.ndarray, gt: np.ndarray) -> FlowMetrics:
    """End-point error statistics between two aligned flow fields."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise DimensionMismatch(
            f"pred and gt must both be (N, 3), got {pred.shape} and {gt.shape}"
        )
    epe = np.linalg.norm(pred - gt, axis=1)
    gt_norm = np.linalg.norm(gt, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(gt_norm > 0, epe / gt_norm, np.where(epe > 0, np.inf, 0.0))
    accs = np.mean((epe < 0.05) | (rel < 0.05)) * 100
    accr = np.mean((epe < 0.1) | (rel < 0.1)) * 100
    outlier = np.mean((epe > 0.3) | (rel > 0.1)) * 100
    return FlowMetrics(epe3d=float(epe.mean()), accs=float(accs), accr=float(accr), outlier=float(outlier))


def mean_seg_metrics(items: list[SegMetrics]) -> SegMetrics:
    """Arithmetic mean of per-scene segmentation metrics."""
    return SegMetrics(*[float(np.mean([getattr(m, f.name) for m in items])) for f in fields(SegMetrics)])


def mean_flow_metrics(items: list[FlowMetrics]) -> FlowMetrics:
    """Arithmetic mean of per-scene flow metrics."""
    return FlowMetrics(*[float(np.mean([getattr(m, f.name) for m in items])) for f in fields(FlowMetrics)])
