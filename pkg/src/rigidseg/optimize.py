"""Per-scene segmentation by gradient descent on mask logits.

Stands in for an amortized segmentation model: each scene's logits are
optimized from scratch against the combined geometry-consistency loss. The
two-view invariance term is realized as an assignment-stability penalty
between independently jittered logit copies, aligned by mask matching; with
direct per-point logits, rigidly transformed views cannot produce different
masks, so the view transforms only parameterize the jittered copies.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClusterMixin

from . import _diffcore as core
from .exceptions import DimensionMismatch, NonFiniteLoss
from .geometry import NeighborhoodSpec, rotation_about_axis
from .losses import (
    LossWeights,
    SmoothnessConfig,
    SoftSegmentation,
    match_masks,
    precompute_neighbors,
)
from .scene import ScenePair
from .validation import check_points


@dataclass(frozen=True)
class SimilarityTransform:
    """Uniform scale + rigid motion: x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class AugmentationConfig:
    """Random view-transform ranges (yaw about the vertical y axis)."""

    scale_range: tuple[float, float] = (0.95, 1.05)
    yaw_range_deg: tuple[float, float] = (-180.0, 180.0)
    xz_translation_range: tuple[float, float] = (0.0, 0.0)
    y_translation_range: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("scale_range", "yaw_range_deg", "xz_translation_range", "y_translation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} interval is empty: {lo} > {hi}")


def sample_augmentation(cfg: AugmentationConfig, rng: np.random.Generator) -> SimilarityTransform:
    """Draw one view transform; deterministic given the generator state."""
    scale = rng.uniform(*cfg.scale_range)
    yaw = np.deg2rad(rng.uniform(*cfg.yaw_range_deg))
    tx = rng.uniform(*cfg.xz_translation_range)
    tz = rng.uniform(*cfg.xz_translation_range)
    ty = rng.uniform(*cfg.y_translation_range)
    rot = rotation_about_axis(np.array([0.0, 1.0, 0.0]), yaw)
    return SimilarityTransform(scale, rot, np.array([tx, ty, tz]))


@dataclass(frozen=True)
class OptimizerConfig:
    num_slots: int = 8
    steps: int = 1000
    learning_rate: float = 0.1
    weights: LossWeights = LossWeights()
    smoothness: SmoothnessConfig = SmoothnessConfig()
    augment: AugmentationConfig = AugmentationConfig()
    smooth_warmup_steps: int = 50
    invariance_enabled: bool = True
    invariance_distance: str = "l2"
    view_logit_std: float = 0.01
    method: str = "adam"  # "adam" | "sgd" (plain fixed-step descent)
    init_logit_std: float = 0.01
    # Random restarts: short seeded probes, the lowest-loss one continues.
    restarts: int = 3
    probe_steps: int = 250
    # Every merge_every steps, greedily merge slot pairs when doing so
    # strictly lowers the (dynamic + smoothness) loss; 0 disables.
    merge_every: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.num_slots < 1 or self.steps < 1:
            raise ValueError("num_slots and steps must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.method not in ("adam", "sgd"):
            raise ValueError("method must be 'adam' or 'sgd'")
        if self.restarts < 1 or self.probe_steps < 1:
            raise ValueError("restarts and probe_steps must be positive")


class _Problem:
    """Precomputed tensors plus the per-step update for one scene."""

    def __init__(self, scene: ScenePair, cfg: OptimizerConfig):
        self.cfg = cfg
        self.points = core.to_tensor(scene.frame_t)
        self.flow = core.to_tensor(scene.flow)
        neighbors = precompute_neighbors(scene.frame_t, cfg.smoothness)
        self.nbr_idx = [torch.as_tensor(p.index) for p in neighbors]
        self.nbr_valid = [torch.as_tensor(p.valid, dtype=torch.float64) for p in neighbors]

    def start(self, restart: int):
        cfg = self.cfg
        n = self.points.shape[0]
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, restart]))
        aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.augment.seed, restart]))
        logits0 = rng.normal(0.0, cfg.init_logit_std, size=(n, cfg.num_slots))
        logits = torch.as_tensor(logits0).requires_grad_(True)
        if cfg.method == "adam":
            opt = torch.optim.Adam([logits], lr=cfg.learning_rate)
        else:
            opt = torch.optim.SGD([logits], lr=cfg.learning_rate)
        return {"logits": logits, "opt": opt, "aug_rng": aug_rng, "step": 0, "trace": []}

    def run(self, state, until: int):
        cfg = self.cfg
        w = cfg.weights
        logits, opt, aug_rng = state["logits"], state["opt"], state["aug_rng"]
        while state["step"] < until:
            step = state["step"]
            opt.zero_grad()
            masks = core.softmax_masks(logits)
            loss = torch.zeros((), dtype=torch.float64)
            if w.dynamic > 0:
                dyn, _, _ = core.dynamic_loss(self.points, self.flow, masks)
                loss = loss + w.dynamic * dyn
            if w.smooth > 0 and step >= cfg.smooth_warmup_steps:
                for i, (_, scale_w) in enumerate(cfg.smoothness.scales):
                    loss = loss + w.smooth * scale_w * core.smooth_loss(
                        masks, self.nbr_idx[i], self.nbr_valid[i], cfg.smoothness.distance
                    )
            if cfg.invariance_enabled and w.invariant > 0:
                sample_augmentation(cfg.augment, aug_rng)
                sample_augmentation(cfg.augment, aug_rng)
                eps1 = torch.as_tensor(aug_rng.normal(0.0, cfg.view_logit_std, size=logits.shape))
                eps2 = torch.as_tensor(aug_rng.normal(0.0, cfg.view_logit_std, size=logits.shape))
                view1 = core.softmax_masks(logits + eps1)
                view2 = core.softmax_masks(logits + eps2)
                matching = match_masks(
                    SoftSegmentation(logits.detach().numpy() + eps1.numpy()),
                    SoftSegmentation(logits.detach().numpy() + eps2.numpy()),
                )
                perm = torch.as_tensor(matching.permutation)
                loss = loss + w.invariant * core.invariance_loss(
                    view1, view2[:, perm], cfg.invariance_distance
                )
            value = float(loss.detach())
            if not np.isfinite(value):
                raise NonFiniteLoss(f"loss became non-finite at step {step}")
            state["trace"].append(value)
            loss.backward()
            opt.step()
            state["step"] = step + 1
            if (
                cfg.merge_every > 0
                and state["step"] > cfg.smooth_warmup_steps
                and state["step"] % cfg.merge_every == 0
            ):
                changed = self.try_merges(state)
                changed = self.try_splits(state) or changed
                changed = self.try_repartition(state) or changed
                if changed:
                    logits, opt = state["logits"], state["opt"]
        return state

    def _loss_of_logits(self, logits: torch.Tensor) -> float:
        cfg = self.cfg
        w = cfg.weights
        with torch.no_grad():
            masks = core.softmax_masks(logits)
            loss = torch.zeros((), dtype=torch.float64)
            if w.dynamic > 0:
                dyn, _, _ = core.dynamic_loss(self.points, self.flow, masks)
                loss = loss + w.dynamic * dyn
            if w.smooth > 0:
                for i, (_, scale_w) in enumerate(cfg.smoothness.scales):
                    loss = loss + w.smooth * scale_w * core.smooth_loss(
                        masks, self.nbr_idx[i], self.nbr_valid[i], cfg.smoothness.distance
                    )
        return float(loss)

    def eval_loss(self, state) -> float:
        """Deterministic selector: dynamic + smoothness at their weights."""
        return self._loss_of_logits(state["logits"])

    @staticmethod
    def _merge_columns(logits: torch.Tensor, i: int, j: int) -> torch.Tensor:
        cand = logits.clone()
        cand[:, i] = torch.logaddexp(logits[:, i], logits[:, j])
        cand[:, j] = -30.0
        return cand

    def _merge_candidates(self, logits: torch.Tensor) -> list[tuple[float, int, int]]:
        k = logits.shape[1]
        out = []
        for i in range(k):
            for j in range(i + 1, k):
                out.append((self._loss_of_logits(self._merge_columns(logits, i, j)), i, j))
        out.sort(key=lambda t: (t[0], t[1], t[2]))
        return out

    def try_merges(self, state) -> bool:
        """Greedily merge slot pairs while that strictly lowers the loss.

        A merge pools column j's probability mass into column i (log-space
        addition) and parks column j far below the active range. Only moves
        that improve the deterministic loss are kept, so the optimization
        objective is untouched; this just jumps over the flat plateaus that
        separate duplicate-transform solutions.
        """
        logits = state["logits"].detach()
        base = self._loss_of_logits(logits)
        merged_any = False
        while True:
            cands = self._merge_candidates(logits)
            if not cands or cands[0][0] >= base - 1e-12:
                break
            val, i, j = cands[0]
            logits = self._merge_columns(logits, i, j)
            base = val
            merged_any = True
        if merged_any:
            self._replace_logits(state, logits)
        return merged_any

    def try_repartition(self, state) -> bool:
        """Composite merge-then-split moves for deadlocked slot layouts.

        When every slot is occupied by mixed content, no single merge or
        split improves the loss. This forces the least-damaging merge to
        free a slot, re-splits some other slot into it, and keeps the
        composite only when it strictly beats the starting loss.
        """
        logits = state["logits"].detach()
        k = logits.shape[1]
        base = self._loss_of_logits(logits)
        applied = False
        while True:
            best = None
            for mval, i, j in self._merge_candidates(logits)[:6]:
                merged = self._merge_columns(logits, i, j)
                counts = np.bincount(merged.numpy().argmax(axis=1), minlength=k)
                for l in range(k):
                    if counts[l] < 16:
                        continue
                    for cand in self._split_candidates(merged, l, j):
                        val = self._loss_of_logits(cand)
                        if val < base - 1e-12 and (best is None or val < best[0]):
                            best = (val, cand)
            if best is None:
                break
            base, logits = best
            applied = True
        if applied:
            self._replace_logits(state, logits)
        return applied

    def _replace_logits(self, state, logits: torch.Tensor) -> None:
        state["logits"] = logits.clone().requires_grad_(True)
        if self.cfg.method == "adam":
            state["opt"] = torch.optim.Adam([state["logits"]], lr=self.cfg.learning_rate)
        else:
            state["opt"] = torch.optim.SGD([state["logits"]], lr=self.cfg.learning_rate)

    def _split_candidates(self, logits: torch.Tensor, slot: int, free_slot: int):
        """Two-transform refits of one slot's points; returns candidate logits.

        The slot's hard members are partitioned by a few alternation rounds
        between two rigid fits. Two seeds are tried (high-residual half and a
        farthest-pair spatial split); each refined group-B gets its logit
        mass moved to the free slot (column swap).
        """
        from .geometry import kabsch_or_identity

        np_logits = logits.numpy()
        labels = np_logits.argmax(axis=1)
        members = np.where(labels == slot)[0]
        if members.size < 16:
            return []
        pts = self.points.numpy()[members]
        tgt = pts + self.flow.numpy()[members]
        fit = kabsch_or_identity(pts, tgt, np.ones(members.size))
        res = np.linalg.norm(fit.apply(pts) - tgt, axis=1)

        seeds = [res > np.median(res)]
        far_a = int(np.argmax(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
        far_b = int(np.argmax(np.linalg.norm(pts - pts[far_a], axis=1)))
        seeds.append(
            np.linalg.norm(pts - pts[far_b], axis=1) < np.linalg.norm(pts - pts[far_a], axis=1)
        )

        out = []
        for group_b in seeds:
            if not group_b.any() or group_b.all():
                continue
            ok = True
            for _ in range(3):
                if group_b.sum() < 3 or (~group_b).sum() < 3:
                    ok = False
                    break
                fit_a = kabsch_or_identity(pts[~group_b], tgt[~group_b], np.ones(int((~group_b).sum())))
                fit_b = kabsch_or_identity(pts[group_b], tgt[group_b], np.ones(int(group_b.sum())))
                res_a = np.linalg.norm(fit_a.apply(pts) - tgt, axis=1)
                res_b = np.linalg.norm(fit_b.apply(pts) - tgt, axis=1)
                new_b = res_b < res_a
                if (new_b == group_b).all():
                    break
                group_b = new_b
            if not ok or not group_b.any() or group_b.all():
                continue
            cand = logits.clone()
            rows = torch.as_tensor(members[group_b])
            col_i = cand[rows, slot].clone()
            cand[rows, slot] = cand[rows, free_slot]
            cand[rows, free_slot] = col_i
            out.append(cand)
        return out

    def try_splits(self, state) -> bool:
        """Greedily split mixed slots into free slots on strict loss decrease."""
        logits = state["logits"].detach()
        k = logits.shape[1]
        base = self._loss_of_logits(logits)
        split_any = False
        while True:
            labels = logits.numpy().argmax(axis=1)
            counts = np.bincount(labels, minlength=k)
            free = [j for j in range(k) if counts[j] == 0]
            if not free:
                break
            best = None
            for i in range(k):
                if counts[i] < 16:
                    continue
                for cand in self._split_candidates(logits, i, free[0]):
                    val = self._loss_of_logits(cand)
                    if val < base - 1e-12 and (best is None or val < best[0]):
                        best = (val, cand)
            if best is None:
                break
            base, logits = best
            split_any = True
        if split_any:
            self._replace_logits(state, logits)
        return split_any


def optimize_masks(scene: ScenePair, cfg: OptimizerConfig) -> tuple[SoftSegmentation, np.ndarray]:
    """Optimize soft masks for scene.frame_t against the combined loss.

    Logits start from small seeded Gaussian noise (near-uniform masks) and
    are updated for cfg.steps iterations. The smoothness term is disabled for
    the first cfg.smooth_warmup_steps. When the invariance term is enabled,
    each step draws two view transforms and two logit jitters and penalizes
    the matched assignment drift between the jittered mask copies.

    With cfg.restarts > 1, that many seeded probes run for cfg.probe_steps
    and the one with the lowest deterministic loss (dynamic + smoothness)
    continues to cfg.steps; the returned trace follows the winner.

    Returns the final segmentation and the per-step combined loss trace.
    Deterministic given (scene, cfg) at a fixed thread count.
    """
    problem = _Problem(scene, cfg)
    probe_until = min(cfg.probe_steps, cfg.steps)
    best_state = None
    best_score = np.inf
    for restart in range(cfg.restarts):
        state = problem.run(problem.start(restart), probe_until)
        score = problem.eval_loss(state)
        if score < best_score:
            best_score = score
            best_state = state
    state = problem.run(best_state, cfg.steps)
    seg = SoftSegmentation(state["logits"].detach().numpy())
    return seg, np.asarray(state["trace"])


def harden(seg: SoftSegmentation) -> np.ndarray:
    """Per-point argmax slot labels; ties go to the lowest slot index."""
    return np.argmax(seg.masks, axis=1).astype(np.int64)


class SceneSegmenter(BaseEstimator, ClusterMixin):
    """Clusterer-style wrapper around optimize_masks.

    fit(X) expects X of shape (N, 6): xyz coordinates stacked with the
    per-point scene flow. A ScenePair may be passed instead of an array.
    After fitting, ``labels_`` holds hardened slot labels and ``masks_`` the
    soft assignment matrix.
    """

    def __init__(
        self,
        num_slots: int = 8,
        steps: int = 1000,
        learning_rate: float = 0.1,
        weight_dynamic: float = 10.0,
        weight_smooth: float = 0.1,
        weight_invariant: float = 0.1,
        smooth_scales: tuple = ((8, 0.02, 3.0), (16, 0.04, 1.0)),
        smooth_distance: str = "l1",
        smooth_warmup_steps: int = 50,
        invariance_enabled: bool = True,
        method: str = "adam",
        restarts: int = 3,
        probe_steps: int = 250,
        seed: int = 0,
    ):
        self.num_slots = num_slots
        self.steps = steps
        self.learning_rate = learning_rate
        self.weight_dynamic = weight_dynamic
        self.weight_smooth = weight_smooth
        self.weight_invariant = weight_invariant
        self.smooth_scales = smooth_scales
        self.smooth_distance = smooth_distance
        self.smooth_warmup_steps = smooth_warmup_steps
        self.invariance_enabled = invariance_enabled
        self.method = method
        self.restarts = restarts
        self.probe_steps = probe_steps
        self.seed = seed

    def _config(self) -> OptimizerConfig:
        scales = tuple(
            (NeighborhoodSpec(k=int(k), radius=float(r)), float(w))
            for k, r, w in self.smooth_scales
        )
        return OptimizerConfig(
            num_slots=self.num_slots,
            steps=self.steps,
            learning_rate=self.learning_rate,
            weights=LossWeights(self.weight_dynamic, self.weight_smooth, self.weight_invariant),
            smoothness=SmoothnessConfig(scales=scales, distance=self.smooth_distance),
            smooth_warmup_steps=self.smooth_warmup_steps,
            invariance_enabled=self.invariance_enabled,
            method=self.method,
            restarts=self.restarts,
            probe_steps=self.probe_steps,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        if isinstance(X, ScenePair):
            scene = X
        else:
            X = np.asarray(X, dtype=np.float64)
            if X.ndim != 2 or X.shape[1] != 6:
                raise DimensionMismatch("X must be (N, 6): xyz columns then flow columns")
            points = check_points(X[:, :3])
            scene = ScenePair(frame_t=points, frame_t1=points + X[:, 3:], flow=X[:, 3:])
        seg, trace = optimize_masks(scene, self._config())
        self.segmentation_ = seg
        self.masks_ = seg.masks
        self.labels_ = harden(seg)
        self.loss_trace_ = trace
        self.n_iter_ = len(trace)
        return self
