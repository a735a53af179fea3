"""Differentiable torch kernels behind the segmentation losses.

All functions take and return float64 tensors and support arbitrary leading
batch dimensions on the mask argument, so finite-difference test batteries can
evaluate hundreds of perturbed mask matrices in one call.

The rigid fit uses the quaternion (eigenvector) formulation rather than SVD:
it returns the same proper rotation as the SVD route but its backward pass
stays finite on isotropic point sets, where the SVD gradient has
1/(sigma_i^2 - sigma_j^2) blowups.
"""

from __future__ import annotations

import numpy as np
import torch

from .geometry import DEGENERATE_WEIGHT_FRACTION

_EPS_LOG = 1e-12


def to_tensor(arr) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr), dtype=torch.float64)


def softmax_masks(logits: torch.Tensor) -> torch.Tensor:
    """Row-stochastic masks from logits; last dim is the slot dim."""
    return torch.softmax(logits, dim=-1)


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """(..., 4) unit quaternion (w, x, y, z) -> (..., 3, 3) rotation."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], dim=-1)
    row1 = torch.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], dim=-1)
    row2 = torch.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def rigid_fit(src: torch.Tensor, dst: torch.Tensor, weights: torch.Tensor):
    """Weighted least-squares rigid fit, batched over leading weight dims.

    src, dst: (N, 3); weights: (..., N) nonnegative.
    Returns (rotation (..., 3, 3), translation (..., 3)). Weight vectors whose
    mass falls below the degeneracy threshold yield the identity transform
    (constant, no gradient), matching the documented empty-mask behavior.
    """
    n = src.shape[0]
    wsum = weights.sum(dim=-1)
    degenerate = wsum < DEGENERATE_WEIGHT_FRACTION * n
    safe_wsum = torch.where(degenerate, torch.ones_like(wsum), wsum)

    centroid_src = (weights[..., None] * src).sum(dim=-2) / safe_wsum[..., None]
    centroid_dst = (weights[..., None] * dst).sum(dim=-2) / safe_wsum[..., None]
    x = src - centroid_src[..., None, :]
    y = dst - centroid_dst[..., None, :]
    cov = torch.einsum("...ni,...n,...nj->...ij", x, weights, y)

    sxx, sxy, sxz = cov[..., 0, 0], cov[..., 0, 1], cov[..., 0, 2]
    syx, syy, syz = cov[..., 1, 0], cov[..., 1, 1], cov[..., 1, 2]
    szx, szy, szz = cov[..., 2, 0], cov[..., 2, 1], cov[..., 2, 2]
    k0 = torch.stack([sxx + syy + szz, syz - szy, szx - sxz, sxy - syx], dim=-1)
    k1 = torch.stack([syz - szy, sxx - syy - szz, sxy + syx, szx + sxz], dim=-1)
    k2 = torch.stack([szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy], dim=-1)
    k3 = torch.stack([sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz], dim=-1)
    kmat = torch.stack([k0, k1, k2, k3], dim=-2)

    # Mask out degenerate problems before eigh so backward stays clean.
    if degenerate.any():
        eye4 = torch.eye(4, dtype=kmat.dtype)
        kmat = torch.where(degenerate[..., None, None], eye4, kmat)
    _, eigvecs = torch.linalg.eigh(kmat)
    quat = eigvecs[..., :, -1]
    rot = quaternion_to_matrix(quat)
    tra = centroid_dst - torch.einsum("...ij,...j->...i", rot, centroid_src)

    if degenerate.any():
        eye3 = torch.eye(3, dtype=rot.dtype)
        rot = torch.where(degenerate[..., None, None], eye3, rot)
        tra = torch.where(degenerate[..., None], torch.zeros_like(tra), tra)
    return rot, tra


def dynamic_loss(points: torch.Tensor, flow: torch.Tensor, masks: torch.Tensor):
    """Mean blended-rigid reconstruction error of the flow.

    Per slot k a rigid transform T_k is fitted to (points, points + flow)
    with the slot's soft mask as weights; the loss is the mean over points of
    ||sum_k o_k * (T_k(p)) - (p + flow)||_2.

    points, flow: (N, 3); masks: (..., N, K).
    Returns (value (...,), rotations (..., K, 3, 3), translations (..., K, 3)).
    """
    target = points + flow
    weights = masks.transpose(-1, -2)  # (..., K, N)
    rot, tra = rigid_fit(points, target, weights)
    # (..., K, N, 3): each point under each slot transform
    moved = torch.einsum("...kij,nj->...kni", rot, points) + tra[..., None, :]
    blended = (masks.transpose(-1, -2)[..., None] * moved).sum(dim=-3)  # (..., N, 3)
    residual = torch.linalg.vector_norm(blended - target, dim=-1)
    return residual.mean(dim=-1), rot, tra


def _row_distance(a: torch.Tensor, b: torch.Tensor, distance: str) -> torch.Tensor:
    """Pointwise distance between assignment rows; inputs (..., K)."""
    if distance == "l1":
        return (a - b).abs().sum(dim=-1)
    if distance == "l2":
        return torch.linalg.vector_norm(a - b, dim=-1)
    if distance == "cross_entropy":
        return -(b * torch.log(a.clamp_min(_EPS_LOG))).sum(dim=-1)
    raise ValueError(f"unknown distance {distance!r}")


def smooth_loss(
    masks: torch.Tensor,
    neighbor_index: torch.Tensor,
    neighbor_valid: torch.Tensor,
    distance: str,
    motion_weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Neighborhood assignment-consistency penalty for one scale.

    masks: (..., N, K); neighbor_index/neighbor_valid: (N, H).
    Each point contributes the mean row distance to its valid neighbors
    (zero when it has none). With ``motion_weights`` (N, H, normalized per
    point), the plain mean is replaced by the weighted mean.
    """
    center = masks[..., :, None, :]  # (..., N, 1, K)
    neigh = masks[..., neighbor_index, :]  # (..., N, H, K)
    d = _row_distance(center, neigh, distance)  # (..., N, H)
    if motion_weights is None:
        counts = neighbor_valid.sum(dim=-1).clamp_min(1)
        per_point = (d * neighbor_valid).sum(dim=-1) / counts
    else:
        per_point = (d * motion_weights).sum(dim=-1)
    return per_point.mean(dim=-1)


def motion_similarity_weights(
    flow: torch.Tensor,
    neighbor_index: torch.Tensor,
    neighbor_valid: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """Per-neighbor weights exp(-||m_n - m_h|| / tau), normalized per point.

    Invalid neighbor slots get weight zero; points with no neighbors get an
    all-zero row (they contribute nothing to the loss). Uniform motions give
    uniform weights 1/H_n, so the weighted loss reduces to the plain one.
    """
    diff = flow[neighbor_index] - flow[:, None, :]  # (N, H, 3)
    sim = torch.exp(-torch.linalg.vector_norm(diff, dim=-1) / tau)
    sim = sim * neighbor_valid
    denom = sim.sum(dim=-1, keepdim=True).clamp_min(_EPS_LOG)
    return sim / denom


def invariance_loss(
    masks_a: torch.Tensor, masks_b_aligned: torch.Tensor, distance: str
) -> torch.Tensor:
    """Mean row distance between two aligned segmentations; (..., N, K)."""
    return _row_distance(masks_a, masks_b_aligned, distance).mean(dim=-1)
