"""Scene-pair record shared by segmentation, refinement and the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .validation import check_flow, check_labels, check_points


@dataclass(frozen=True)
class ScenePair:
    """Two consecutive point-cloud frames plus the frame-t scene flow.

    ``flow`` maps frame_t points toward frame_t1 (displacements, same order
    as frame_t). Ground-truth labels and flow are optional and only used for
    evaluation.
    """

    frame_t: np.ndarray
    frame_t1: np.ndarray
    flow: np.ndarray
    gt_labels_t: np.ndarray | None = None
    gt_labels_t1: np.ndarray | None = None
    gt_flow: np.ndarray | None = None
    scene_id: str = ""

    def __post_init__(self):
        frame_t = check_points(self.frame_t, "frame_t")
        frame_t1 = check_points(self.frame_t1, "frame_t1")
        flow = check_flow(self.flow, frame_t.shape[0])
        object.__setattr__(self, "frame_t", frame_t)
        object.__setattr__(self, "frame_t1", frame_t1)
        object.__setattr__(self, "flow", flow)
        if self.gt_labels_t is not None:
            object.__setattr__(
                self, "gt_labels_t", check_labels(self.gt_labels_t, frame_t.shape[0])
            )
        if self.gt_labels_t1 is not None:
            object.__setattr__(
                self, "gt_labels_t1", check_labels(self.gt_labels_t1, frame_t1.shape[0])
            )
        if self.gt_flow is not None:
            object.__setattr__(self, "gt_flow", check_flow(self.gt_flow, frame_t.shape[0]))

    @property
    def n_points(self) -> int:
        return self.frame_t.shape[0]

    def with_flow(self, flow: np.ndarray) -> "ScenePair":
        """Copy of this pair with the flow replaced (inputs stay unmodified)."""
        return replace(self, flow=flow)
