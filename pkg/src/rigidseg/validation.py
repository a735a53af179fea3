"""Input validation helpers.

All public entry points normalize their array inputs through these helpers so
the numerical kernels can assume well-formed float64 data.
"""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionMismatch


def check_points(points, name: str = "points") -> np.ndarray:
    """Validate an (N, 3) coordinate array, N >= 1, finite; returns float64."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionMismatch(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise DimensionMismatch(f"{name} must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_flow(flow, n_points: int, name: str = "flow") -> np.ndarray:
    """Validate an (N, 3) displacement array aligned with a point cloud."""
    arr = np.asarray(flow, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionMismatch(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] != n_points:
        raise DimensionMismatch(
            f"{name} has {arr.shape[0]} rows but the point cloud has {n_points}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_weights(weights, n_points: int, name: str = "weights") -> np.ndarray:
    """Validate a nonnegative, finite length-N weight vector."""
    arr = np.asarray(weights, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != n_points:
        raise DimensionMismatch(
            f"{name} must be a length-{n_points} vector, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if np.any(arr < 0):
        raise ValueError(f"{name} contains negative entries")
    return arr


def check_masks(masks, n_points: int | None = None, name: str = "masks") -> np.ndarray:
    """Validate an (N, K) soft-mask matrix: entries in [0, 1], rows sum to 1."""
    arr = np.asarray(masks, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise DimensionMismatch(f"{name} must have shape (N, K), got {arr.shape}")
    if n_points is not None and arr.shape[0] != n_points:
        raise DimensionMismatch(
            f"{name} has {arr.shape[0]} rows but the point cloud has {n_points}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if np.any(arr < -1e-9) or np.any(arr > 1 + 1e-9):
        raise ValueError(f"{name} has entries outside [0, 1]")
    if not np.allclose(arr.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError(f"{name} rows must sum to 1 within 1e-6")
    return arr


def check_labels(labels, n_points: int | None = None, name: str = "labels") -> np.ndarray:
    """Validate an integer label vector; returns int64."""
    arr = np.asarray(labels)
    if not np.issubdtype(arr.dtype, np.integer):
        if np.issubdtype(arr.dtype, np.floating) and np.all(arr == np.round(arr)):
            arr = arr.astype(np.int64)
        else:
            raise ValueError(f"{name} must be integers")
    arr = arr.astype(np.int64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be one-dimensional, got shape {arr.shape}")
    if n_points is not None and arr.shape[0] != n_points:
        raise DimensionMismatch(
            f"{name} has {arr.shape[0]} entries but the point cloud has {n_points}"
        )
    return arr


def check_features(features, name: str = "features") -> np.ndarray:
    """Validate an (N, D) feature matrix for the clustering baselines."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise DimensionMismatch(f"{name} must have shape (N, D) with N >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr
