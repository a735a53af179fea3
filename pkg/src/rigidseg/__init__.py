"""rigidseg: multi-object rigid scene segmentation from point-cloud pairs.

Segments rigid objects by optimizing soft masks against geometry-consistency
losses over scene flow, refines the flow with object-aware ICP, and alternates
the two stages. Ships a synthetic dynamic-scene generator, clustering
baselines, a full metric suite, and a CLI (``rigidseg``).
"""

__version__ = "0.1.0"

from .exceptions import (
    BadMagic,
    DegenerateWeights,
    DimensionMismatch,
    GenerationFailed,
    MissingFlow,
    NonFiniteLoss,
    RigidsegError,
    SceneFileError,
    TruncatedFile,
    UnsupportedVersion,
)
from .geometry import (
    NeighborhoodSpec,
    RigidTransform,
    apply_transform,
    neighborhood_query,
    weighted_kabsch,
)
from .losses import (
    LossWeights,
    MaskMatching,
    SmoothnessConfig,
    SoftSegmentation,
    combined_loss,
    dynamic_loss,
    invariance_loss,
    match_masks,
    smooth_loss,
    soft_iou_matrix,
    weighted_smooth_loss,
)
from .scene import ScenePair

__all__ = [
    "__version__",
    "RigidsegError",
    "DimensionMismatch",
    "DegenerateWeights",
    "NonFiniteLoss",
    "GenerationFailed",
    "SceneFileError",
    "BadMagic",
    "UnsupportedVersion",
    "TruncatedFile",
    "MissingFlow",
    "RigidTransform",
    "NeighborhoodSpec",
    "apply_transform",
    "weighted_kabsch",
    "neighborhood_query",
    "SoftSegmentation",
    "LossWeights",
    "SmoothnessConfig",
    "MaskMatching",
    "dynamic_loss",
    "smooth_loss",
    "weighted_smooth_loss",
    "match_masks",
    "invariance_loss",
    "combined_loss",
    "soft_iou_matrix",
    "ScenePair",
]
