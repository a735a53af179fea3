"""Object-aware ICP: scene-flow refinement driven by cross-frame masks.

Masks are transported to the next frame by nearest-neighbor lookup of
flow-warped points, aligned slot-to-slot, and then used to (a) filter soft
point correspondences to object-consistent pairs and (b) rigidify the flow
per object after every correspondence update. The refined flow is always a
mask blend of per-slot rigid motions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import DimensionMismatch
from .geometry import kabsch_or_identity
from .losses import MaskMatching, SoftSegmentation, match_masks
from .scene import ScenePair
from .validation import check_flow, check_masks, check_points


@dataclass(frozen=True)
class IcpConfig:
    iterations: int = 20
    # None: 0.05 x median nearest-neighbor spacing of frame t+1
    temperature: float | None = None
    correspondence_k: int = 32
    dense: bool = False  # exact all-pairs correspondences (quadratic)
    skip_correspondence: bool = False  # rigidification only (test hook)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.temperature is not None and not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.correspondence_k < 1:
            raise ValueError("correspondence_k must be >= 1")


def transport_masks(
    p_warped: np.ndarray, seg_t: SoftSegmentation, p_next: np.ndarray
) -> SoftSegmentation:
    """Each next-frame point inherits the mask row of its nearest warped point."""
    p_warped = check_points(p_warped, "p_warped")
    p_next = check_points(p_next, "p_next")
    if seg_t.n_points != p_warped.shape[0]:
        raise DimensionMismatch("seg_t rows must match p_warped")
    _, nearest = cKDTree(p_warped).query(p_next, k=1)
    return SoftSegmentation(seg_t.logits[nearest])


def align_frame_masks(
    scene: ScenePair, seg_t: SoftSegmentation, seg_t1: SoftSegmentation
) -> tuple[SoftSegmentation, MaskMatching]:
    """Permute seg_t1 slots so slot k names the same object in both frames.

    The reference order comes from transporting seg_t across the scene flow.
    """
    transported = transport_masks(scene.frame_t + scene.flow, seg_t, scene.frame_t1)
    matching = match_masks(transported, seg_t1)
    return seg_t1.permute_slots(matching.permutation), matching


def rigidify_flow(
    points: np.ndarray, flow: np.ndarray, seg: SoftSegmentation
) -> np.ndarray:
    """One pass of per-slot rigid fitting; returns the mask-blended rigid flow."""
    points = check_points(points)
    flow = check_flow(flow, points.shape[0])
    masks = check_masks(seg.masks, points.shape[0])
    target = points + flow
    blended = np.zeros_like(points)
    for k in range(masks.shape[1]):
        t_k = kabsch_or_identity(points, target, masks[:, k])
        blended += masks[:, k:k + 1] * t_k.apply(points)
    return blended - points


def _median_nn_spacing(points: np.ndarray) -> float:
    tree = cKDTree(points)
    d, _ = tree.query(points, k=2)
    return float(np.median(d[:, 1]))


def object_aware_icp(
    scene: ScenePair,
    seg_t: SoftSegmentation,
    seg_t1_aligned: SoftSegmentation,
    cfg: IcpConfig | None = None,
) -> np.ndarray:
    """Iteratively refine scene flow with mask-filtered soft correspondences.

    Per iteration: soft correspondence scores exp(-dist / tau) from warped
    frame-t points to frame-t+1 points are filtered by the cross-frame mask
    consistency (mask row dot products); flows move to the score-weighted
    mean target (points whose filtered row is all zero keep their current
    flow for that step); the flow field is then rigidified per slot. Returns
    the refined flow.
    """
    cfg = cfg or IcpConfig()
    points = scene.frame_t
    p_next = scene.frame_t1
    flow = scene.flow.copy()
    n = points.shape[0]
    if seg_t.n_points != n:
        raise DimensionMismatch("seg_t rows must match frame_t")
    if seg_t1_aligned.n_points != p_next.shape[0]:
        raise DimensionMismatch("seg_t1 rows must match frame_t1")
    if seg_t.n_slots != seg_t1_aligned.n_slots:
        raise DimensionMismatch("segmentations must share the slot count")

    tau = cfg.temperature if cfg.temperature is not None else 0.05 * _median_nn_spacing(p_next)
    masks_t = seg_t.masks
    masks_t1 = seg_t1_aligned.masks
    tree = cKDTree(p_next)
    k_eff = min(cfg.correspondence_k, p_next.shape[0])

    for _ in range(cfg.iterations):
        if not cfg.skip_correspondence:
            warped = points + flow
            if cfg.dense:
                delta = np.linalg.norm(warped[:, None, :] - p_next[None, :, :], axis=2)
                scores = np.exp(-delta / tau) * (masks_t @ masks_t1.T)
                weight_sum = scores.sum(axis=1)
                ok = weight_sum > 0
                updated = (scores @ p_next)[ok] / weight_sum[ok, None] - points[ok]
                flow = flow.copy()
                flow[ok] = updated
            else:
                dist, idx = tree.query(warped, k=k_eff)
                if k_eff == 1:
                    dist, idx = dist[:, None], idx[:, None]
                consistency = np.einsum("nk,njk->nj", masks_t, masks_t1[idx])
                scores = np.exp(-dist / tau) * consistency
                weight_sum = scores.sum(axis=1)
                ok = weight_sum > 0
                targets = np.einsum("nj,njd->nd", scores, p_next[idx])
                flow = flow.copy()
                flow[ok] = targets[ok] / weight_sum[ok, None] - points[ok]
        flow = rigidify_flow(points, flow, seg_t)
    return flow
