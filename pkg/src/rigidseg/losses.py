"""Geometry-consistency losses over soft object masks, with gradients.

Three losses drive the segmentation: a blended-rigid flow reconstruction
error (one rigid fit per mask slot), a neighborhood assignment-smoothness
penalty, and an assignment-invariance penalty between two matched
segmentations. All gradients are with respect to the mask logits and are
validated against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from . import _diffcore as core
from .exceptions import DimensionMismatch
from .geometry import NeighborhoodSpec, PackedNeighbors, RigidTransform, neighborhood_query, pack_neighbors
from .scene import ScenePair
from .validation import check_flow, check_points

DISTANCES = ("l1", "l2", "cross_entropy")


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class SoftSegmentation:
    """Row-stochastic soft masks over K object slots, parameterized by logits."""

    logits: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[1] < 1:
            raise DimensionMismatch(f"logits must have shape (N, K), got {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits contain non-finite values")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "_masks", _stable_softmax(logits))

    @property
    def masks(self) -> np.ndarray:
        return self._masks

    @property
    def n_points(self) -> int:
        return self.logits.shape[0]

    @property
    def n_slots(self) -> int:
        return self.logits.shape[1]

    @staticmethod
    def from_masks(masks: np.ndarray) -> "SoftSegmentation":
        """Build from a row-stochastic mask matrix (logits = log masks)."""
        masks = np.asarray(masks, dtype=np.float64)
        return SoftSegmentation(np.log(np.clip(masks, 1e-12, None)))

    @staticmethod
    def from_labels(labels: np.ndarray, n_slots: int) -> "SoftSegmentation":
        """One-hot segmentation from integer labels in [0, n_slots)."""
        labels = np.asarray(labels, dtype=np.int64)
        masks = np.zeros((labels.shape[0], n_slots))
        masks[np.arange(labels.shape[0]), labels] = 1.0
        return SoftSegmentation.from_masks(masks)

    def permute_slots(self, permutation: np.ndarray) -> "SoftSegmentation":
        """Reorder slots so new slot k is old slot permutation[k]."""
        return SoftSegmentation(self.logits[:, np.asarray(permutation, dtype=np.int64)])


@dataclass(frozen=True)
class LossWeights:
    """Coefficients combining the three loss terms."""

    dynamic: float = 10.0
    smooth: float = 0.1
    invariant: float = 0.1

    def __post_init__(self):
        for name in ("dynamic", "smooth", "invariant"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} weight must be finite and >= 0")


@dataclass(frozen=True)
class SmoothnessConfig:
    """Multi-scale neighborhood scheme plus the row-distance choice."""

    scales: tuple[tuple[NeighborhoodSpec, float], ...] = (
        (NeighborhoodSpec(k=8, radius=0.02), 3.0),
        (NeighborhoodSpec(k=16, radius=0.04), 1.0),
    )
    distance: str = "l1"

    def __post_init__(self):
        if len(self.scales) < 1:
            raise ValueError("at least one smoothness scale is required")
        if any(w <= 0 for _, w in self.scales):
            raise ValueError("scale weights must be positive")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")


@dataclass(frozen=True)
class MaskMatching:
    """A slot bijection between two segmentations and its total soft IoU."""

    permutation: np.ndarray
    total_iou: float


def precompute_neighbors(points: np.ndarray, cfg: SmoothnessConfig) -> list[PackedNeighbors]:
    """Packed neighbor tables for every scale of a smoothness config."""
    points = check_points(points)
    return [pack_neighbors(neighborhood_query(points, spec), spec.k) for spec, _ in cfg.scales]


def _check_pair(seg_a: SoftSegmentation, seg_b: SoftSegmentation):
    if seg_a.logits.shape != seg_b.logits.shape:
        raise DimensionMismatch(
            f"segmentations disagree in shape: {seg_a.logits.shape} vs {seg_b.logits.shape}"
        )


def _grad_of(value: torch.Tensor, logits: torch.Tensor) -> np.ndarray:
    (grad,) = torch.autograd.grad(value, logits)
    return grad.numpy()


def dynamic_loss(
    points: np.ndarray, flow: np.ndarray, seg: SoftSegmentation
) -> tuple[float, np.ndarray, list[RigidTransform]]:
    """Blended-rigid flow reconstruction error.

    Fits one rigid transform per slot (weights = soft mask column, identity
    for empty slots), then averages the per-point distance between the
    mask-blended transformed positions and the flow targets.

    Returns (value, d value / d logits, per-slot transforms).
    """
    points = check_points(points)
    flow = check_flow(flow, points.shape[0])
    if seg.n_points != points.shape[0]:
        raise DimensionMismatch(
            f"segmentation has {seg.n_points} rows but the cloud has {points.shape[0]}"
        )
    logits_t = core.to_tensor(seg.logits).requires_grad_(True)
    masks_t = core.softmax_masks(logits_t)
    value_t, rot_t, tra_t = core.dynamic_loss(core.to_tensor(points), core.to_tensor(flow), masks_t)
    grad = _grad_of(value_t, logits_t)
    rot = rot_t.detach().numpy()
    tra = tra_t.detach().numpy()
    transforms = [RigidTransform(rot[k], tra[k]) for k in range(seg.n_slots)]
    return float(value_t.detach()), grad, transforms


def smooth_loss(
    points: np.ndarray,
    seg: SoftSegmentation,
    cfg: SmoothnessConfig | None = None,
    neighbors: list[PackedNeighbors] | None = None,
) -> tuple[float, np.ndarray]:
    """Neighborhood assignment-consistency penalty, summed over scales.

    Each point contributes the mean row distance to its neighbors at each
    scale (empty neighborhoods contribute zero), scaled by that scale's
    weight. Returns (value, d value / d logits).
    """
    cfg = cfg or SmoothnessConfig()
    points = check_points(points)
    if seg.n_points != points.shape[0]:
        raise DimensionMismatch("segmentation rows must match the point cloud")
    if neighbors is None:
        neighbors = precompute_neighbors(points, cfg)
    logits_t = core.to_tensor(seg.logits).requires_grad_(True)
    masks_t = core.softmax_masks(logits_t)
    value_t = None
    for packed, (_spec, weight) in zip(neighbors, cfg.scales):
        idx = torch.as_tensor(packed.index)
        valid = torch.as_tensor(packed.valid, dtype=torch.float64)
        term = weight * core.smooth_loss(masks_t, idx, valid, cfg.distance)
        value_t = term if value_t is None else value_t + term
    grad = _grad_of(value_t, logits_t)
    return float(value_t.detach()), grad


def weighted_smooth_loss(
    points: np.ndarray,
    flow: np.ndarray,
    seg: SoftSegmentation,
    cfg: SmoothnessConfig | None = None,
    tau: float = 0.01,
    neighbors: list[PackedNeighbors] | None = None,
) -> tuple[float, np.ndarray]:
    """Smoothness penalty with per-neighbor motion-similarity weighting.

    Neighbor terms are weighted by exp(-||m_n - m_h|| / tau), normalized per
    point, so points moving together are smoothed strongly and points moving
    apart barely interact. Uniform motions reduce this to smooth_loss.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    cfg = cfg or SmoothnessConfig()
    points = check_points(points)
    flow = check_flow(flow, points.shape[0])
    if seg.n_points != points.shape[0]:
        raise DimensionMismatch("segmentation rows must match the point cloud")
    if neighbors is None:
        neighbors = precompute_neighbors(points, cfg)
    flow_t = core.to_tensor(flow)
    logits_t = core.to_tensor(seg.logits).requires_grad_(True)
    masks_t = core.softmax_masks(logits_t)
    value_t = None
    for packed, (_spec, weight) in zip(neighbors, cfg.scales):
        idx = torch.as_tensor(packed.index)
        valid = torch.as_tensor(packed.valid, dtype=torch.float64)
        mw = core.motion_similarity_weights(flow_t, idx, valid, tau)
        term = weight * core.smooth_loss(masks_t, idx, valid, cfg.distance, motion_weights=mw)
        value_t = term if value_t is None else value_t + term
    grad = _grad_of(value_t, logits_t)
    return float(value_t.detach()), grad


def soft_iou_matrix(masks_a: np.ndarray, masks_b: np.ndarray) -> np.ndarray:
    """Pairwise soft IoU between mask columns: sum min / sum max.

    Reduces to set IoU on one-hot masks. An all-zero pair (0/0) scores 0.
    """
    inter = np.minimum(masks_a[:, :, None], masks_b[:, None, :]).sum(axis=0)
    union = np.maximum(masks_a[:, :, None], masks_b[:, None, :]).sum(axis=0)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _lexicographic_optimal_assignment(score: np.ndarray) -> np.ndarray:
    """Max-total assignment; among ties, the lexicographically smallest."""
    k = score.shape[0]
    rows, cols = linear_sum_assignment(-score)
    best = score[rows, cols].sum()
    tol = 1e-9 * max(1.0, np.abs(score).max()) * k
    if np.unique(score).size == score.size:
        perm = np.empty(k, dtype=np.int64)
        perm[rows] = cols
        return perm
    # Duplicated scores can tie; fix columns row by row, smallest index first.
    perm = np.empty(k, dtype=np.int64)
    cols_left = list(range(k))
    target = best
    for row in range(k):
        for c in cols_left:
            rest_cols = [x for x in cols_left if x != c]
            if row + 1 < k:
                sub = score[np.ix_(range(row + 1, k), rest_cols)]
                r, cc = linear_sum_assignment(-sub)
                rest = sub[r, cc].sum()
            else:
                rest = 0.0
            if score[row, c] + rest >= target - tol:
                perm[row] = c
                cols_left.remove(c)
                target = rest
                break
    return perm


def match_masks(seg_a: SoftSegmentation, seg_b: SoftSegmentation) -> MaskMatching:
    """One-one slot matching maximizing total pairwise soft IoU.

    permutation[k] is the slot of ``seg_b`` matched to slot k of ``seg_a``.
    Ties resolve to the lexicographically smallest permutation.
    """
    _check_pair(seg_a, seg_b)
    iou = soft_iou_matrix(seg_a.masks, seg_b.masks)
    perm = _lexicographic_optimal_assignment(iou)
    return MaskMatching(perm, float(iou[np.arange(iou.shape[0]), perm].sum()))


def invariance_loss(
    seg_a: SoftSegmentation,
    seg_b: SoftSegmentation,
    distance: str = "l2",
    matching: MaskMatching | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean row distance between two segmentations after slot alignment.

    The slot matching is treated as a constant during differentiation.
    Returns (value, d value / d logits_a, d value / d logits_b).
    """
    _check_pair(seg_a, seg_b)
    if distance not in DISTANCES:
        raise ValueError(f"distance must be one of {DISTANCES}")
    if matching is None:
        matching = match_masks(seg_a, seg_b)
    perm = torch.as_tensor(np.asarray(matching.permutation, dtype=np.int64))
    logits_a = core.to_tensor(seg_a.logits).requires_grad_(True)
    logits_b = core.to_tensor(seg_b.logits).requires_grad_(True)
    masks_a = core.softmax_masks(logits_a)
    masks_b = core.softmax_masks(logits_b)[:, perm]
    value_t = core.invariance_loss(masks_a, masks_b, distance)
    grad_a, grad_b = torch.autograd.grad(value_t, (logits_a, logits_b))
    return float(value_t.detach()), grad_a.numpy(), grad_b.numpy()


def combined_loss(
    scene: ScenePair,
    seg: SoftSegmentation,
    seg_aug_pair: tuple[SoftSegmentation, SoftSegmentation] | None = None,
    weights: LossWeights | None = None,
    cfg: SmoothnessConfig | None = None,
    neighbors: list[PackedNeighbors] | None = None,
    invariance_distance: str = "l2",
) -> tuple[float, np.ndarray]:
    """Weighted sum of the three losses and its gradient.

    value = dynamic_w * dynamic + smooth_w * smooth + invariant_w * invariance
    where the invariance term uses the two view segmentations in
    ``seg_aug_pair`` (skipped when the pair is absent or its weight is zero).
    View segmentations are treated as jittered copies of ``seg``'s logits, so
    their gradients accumulate onto the returned gradient.
    """
    weights = weights or LossWeights()
    cfg = cfg or SmoothnessConfig()
    value = 0.0
    grad = np.zeros_like(seg.logits)
    if weights.dynamic > 0:
        v, g, _ = dynamic_loss(scene.frame_t, scene.flow, seg)
        value += weights.dynamic * v
        grad += weights.dynamic * g
    if weights.smooth > 0:
        v, g = smooth_loss(scene.frame_t, seg, cfg, neighbors=neighbors)
        value += weights.smooth * v
        grad += weights.smooth * g
    if weights.invariant > 0 and seg_aug_pair is not None:
        v, ga, gb = invariance_loss(seg_aug_pair[0], seg_aug_pair[1], invariance_distance)
        value += weights.invariant * v
        grad += weights.invariant * (ga + gb)
    return value, grad
