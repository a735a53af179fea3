"""Rigid transforms, weighted least-squares rigid fitting, neighborhood queries.

Everything here is pure and numpy-based. The differentiable counterpart of
:func:`weighted_kabsch` used by the segmentation losses lives in
``rigidseg._diffcore``; both solve the same problem and are tested against
each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import DegenerateWeights, DimensionMismatch
from .validation import check_points, check_weights

# Below this fraction of N, a weight vector is treated as an empty mask.
DEGENERATE_WEIGHT_FRACTION = 1e-6


@dataclass(frozen=True)
class RigidTransform:
    """A proper rigid motion: x -> rotation @ x + translation.

    rotation must be orthonormal with det +1 (checked to 1e-9 on
    construction). Instances are treated as immutable.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise DimensionMismatch(f"rotation must be 3x3, got {rot.shape}")
        if tra.shape != (3,):
            raise DimensionMismatch(f"translation must be a 3-vector, got {tra.shape}")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1 within 1e-9")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Composition (self o other): x -> self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rot_inv = self.rotation.T
        return RigidTransform(rot_inv, -rot_inv @ self.translation)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Up to ``k`` nearest neighbors inside a ball of ``radius``."""

    k: int
    radius: float

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.radius > 0:
            raise ValueError("radius must be positive")


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix for an angle (radians) about a unit axis (Rodrigues)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cross = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return c * np.eye(3) + s * cross + (1 - c) * np.outer(axis, axis)


def apply_transform(transform: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Apply a rigid transform to every point; order and N are preserved."""
    return transform.apply(check_points(points))


def weighted_kabsch(src: np.ndarray, dst: np.ndarray, weights: np.ndarray) -> RigidTransform:
    """Least-squares rigid alignment of weighted correspondences.

    Minimizes sum_i w_i ||R @ src_i + t - dst_i||^2 over proper rotations:
    weighted centroids are subtracted, the weighted cross-covariance is
    decomposed by SVD, and the sign of the smallest singular direction is
    flipped whenever the determinant would be -1.

    Raises DegenerateWeights when the total weight is below
    DEGENERATE_WEIGHT_FRACTION * N; callers treat that as "empty mask" and
    substitute the identity.
    """
    src = check_points(src, "src")
    dst = check_points(dst, "dst")
    if src.shape[0] != dst.shape[0]:
        raise DimensionMismatch(
            f"src has {src.shape[0]} points but dst has {dst.shape[0]}"
        )
    w = check_weights(weights, src.shape[0])
    wsum = w.sum()
    if wsum < DEGENERATE_WEIGHT_FRACTION * src.shape[0]:
        raise DegenerateWeights(
            f"total weight {wsum:.3e} is below the degeneracy threshold"
        )

    centroid_src = (w[:, None] * src).sum(axis=0) / wsum
    centroid_dst = (w[:, None] * dst).sum(axis=0) / wsum
    x = src - centroid_src
    y = dst - centroid_dst
    cov = x.T @ (w[:, None] * y)

    u, _, vt = np.linalg.svd(cov)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    if d == 0:  # fully degenerate covariance; keep the proper branch
        d = 1.0
    rot = v @ np.diag([1.0, 1.0, d]) @ u.T
    tra = centroid_dst - rot @ centroid_src
    return RigidTransform(rot, tra)


def kabsch_or_identity(src: np.ndarray, dst: np.ndarray, weights: np.ndarray) -> RigidTransform:
    """weighted_kabsch with the documented identity fallback on empty masks."""
    try:
        return weighted_kabsch(src, dst, weights)
    except DegenerateWeights:
        return RigidTransform.identity()


def neighborhood_query(points: np.ndarray, spec: NeighborhoodSpec) -> list[np.ndarray]:
    """Per-point neighbor lists: up to k nearest other points within radius.

    Results are sorted by ascending distance, ties broken by lower index, self
    excluded. Isolated points get empty lists. Exact (k-d tree backed, no
    approximation).
    """
    points = check_points(points)
    tree = cKDTree(points)
    candidates = tree.query_ball_point(points, spec.radius)
    out: list[np.ndarray] = []
    for i, cand in enumerate(candidates):
        idx = np.asarray([j for j in cand if j != i], dtype=np.int64)
        if idx.size == 0:
            out.append(idx)
            continue
        dist = np.linalg.norm(points[idx] - points[i], axis=1)
        order = np.lexsort((idx, dist))
        out.append(idx[order[: spec.k]])
    return out


@dataclass(frozen=True)
class PackedNeighbors:
    """Neighbor lists padded to (N, k) for vectorized gathers.

    ``index`` holds neighbor indices (padded with 0); ``valid`` flags real
    entries; ``counts`` is the per-point neighbor count.
    """

    index: np.ndarray
    valid: np.ndarray
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "counts", self.valid.sum(axis=1))


def pack_neighbors(neighbors: list[np.ndarray], k: int) -> PackedNeighbors:
    """Pad ragged neighbor lists into fixed-width index/valid arrays."""
    n = len(neighbors)
    index = np.zeros((n, k), dtype=np.int64)
    valid = np.zeros((n, k), dtype=bool)
    for i, idx in enumerate(neighbors):
        m = min(len(idx), k)
        index[i, :m] = idx[:m]
        valid[i, :m] = True
    return PackedNeighbors(index, valid)
