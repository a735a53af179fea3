"""Synthetic dynamic-scene generator.

Rooms of rigid primitive objects (boxes, cylinders, spheres, L-shapes) with
per-frame random rigid motions. Surface points are re-sampled independently
per frame, so consecutive frames have no exact point correspondences; the
ground-truth flow is defined analytically from the object step transforms
applied to the frame-t samples. Walls and ground are used only to place and
bound objects and are not emitted as points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import GenerationFailed
from .geometry import RigidTransform, rotation_about_axis
from .scene import ScenePair
from .validation import check_flow


@dataclass(frozen=True)
class SceneGenConfig:
    num_objects: tuple[int, int] = (4, 8)
    frames: int = 4
    points_per_frame: int = 512
    room_aspect: tuple[float, float] = (0.6, 1.0)
    object_scale: tuple[float, float] = (0.2, 0.45)
    step_rotation_deg: tuple[float, float] = (-10.0, 10.0)
    # probabilities of rotating about the y / x / z axis at each step
    rotation_axis_probs: tuple[float, float, float] = (0.6, 0.2, 0.2)
    step_translation: tuple[float, float] = (-0.04, 0.04)  # x-z plane only
    max_rejections: int = 20000
    seed: int = 0

    def __post_init__(self):
        for name in ("num_objects", "room_aspect", "object_scale", "step_rotation_deg", "step_translation"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} interval is empty: {lo} > {hi}")
        if abs(sum(self.rotation_axis_probs) - 1.0) > 1e-9:
            raise ValueError("rotation_axis_probs must sum to 1")
        if self.frames < 1 or self.points_per_frame < 1 or self.max_rejections < 1:
            raise ValueError("frames, points_per_frame and max_rejections must be positive")


@dataclass(frozen=True)
class GeneratedScene:
    """Frames, per-point labels, analytic flows and per-frame object poses."""

    frames: tuple[np.ndarray, ...]
    labels: tuple[np.ndarray, ...]
    gt_flows: tuple[np.ndarray, ...]
    object_poses: tuple[tuple[RigidTransform, ...], ...]  # [frame][object]
    scene_id: str = ""

    @property
    def n_objects(self) -> int:
        return len(self.object_poses[0])

    @property
    def n_frames(self) -> int:
        return len(self.frames)


class _Shape:
    """A primitive surface in canonical coordinates (base centered at origin).

    ``corners`` bound the shape (used for collision AABBs); ``sample``
    draws area-weighted surface points.
    """

    def __init__(self, kind: str, dims: np.ndarray):
        self.kind = kind
        self.dims = dims

    def corners(self) -> np.ndarray:
        if self.kind == "lshape":
            sx, sy, sz = self.dims
            return _box_corners(sx, sy, sz)
        sx, sy, sz = self.dims
        return _box_corners(sx, sy, sz)

    def area(self) -> float:
        sx, sy, sz = self.dims
        if self.kind == "box":
            return 2 * (sx * sy + sy * sz + sx * sz)
        if self.kind == "cylinder":
            r, h = sx / 2, sy
            return 2 * np.pi * r * h + 2 * np.pi * r * r
        if self.kind == "sphere":
            r = sx / 2
            return 4 * np.pi * r * r
        if self.kind == "lshape":
            # two boxes, inner contact faces ignored (sampling handles parts)
            return 2 * (sx * sy + sy * sz + sx * sz)
        raise ValueError(self.kind)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "box":
            return _sample_box(self.dims, n, rng)
        if self.kind == "cylinder":
            return _sample_cylinder(self.dims[0] / 2, self.dims[1], n, rng)
        if self.kind == "sphere":
            return _sample_sphere(self.dims[0] / 2, n, rng)
        if self.kind == "lshape":
            return _sample_lshape(self.dims, n, rng)
        raise ValueError(self.kind)


def _box_corners(sx, sy, sz) -> np.ndarray:
    xs = np.array([-sx / 2, sx / 2])
    ys = np.array([0.0, sy])
    zs = np.array([-sz / 2, sz / 2])
    return np.array([[x, y, z] for x in xs for y in ys for z in zs])


def _sample_box(dims, n, rng) -> np.ndarray:
    sx, sy, sz = dims
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    for f in range(6):
        m = face == f
        if f in (0, 1):  # +-x faces
            pts[m] = np.column_stack(
                [np.full(m.sum(), (0.5 if f == 0 else -0.5) * sx), (u[m] + 0.5) * sy, v[m] * sz]
            )
        elif f in (2, 3):  # +-y faces
            pts[m] = np.column_stack(
                [u[m] * sx, np.full(m.sum(), sy if f == 2 else 0.0), v[m] * sz]
            )
        else:  # +-z faces
            pts[m] = np.column_stack(
                [u[m] * sx, (v[m] + 0.5) * sy, np.full(m.sum(), (0.5 if f == 4 else -0.5) * sz)]
            )
    return pts


def _sample_cylinder(radius, height, n, rng) -> np.ndarray:
    lateral = 2 * np.pi * radius * height
    cap = np.pi * radius * radius
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    m = part == 0
    y = rng.uniform(0, height, size=n)
    pts[m] = np.column_stack([radius * np.cos(theta[m]), y[m], radius * np.sin(theta[m])])
    for p, yv in ((1, height), (2, 0.0)):
        m = part == p
        r = radius * np.sqrt(rng.uniform(0, 1, size=n))[m]
        pts[m] = np.column_stack([r * np.cos(theta[m]), np.full(m.sum(), yv), r * np.sin(theta[m])])
    return pts


def _sample_sphere(radius, n, rng) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return radius * v + np.array([0.0, radius, 0.0])


def _sample_lshape(dims, n, rng) -> np.ndarray:
    # vertical stem plus a horizontal foot, inside the same bounding box
    sx, sy, sz = dims
    stem = np.array([sx * 0.45, sy, sz])
    foot = np.array([sx, sy * 0.35, sz])
    a_stem = 2 * (stem[0] * stem[1] + stem[1] * stem[2] + stem[0] * stem[2])
    a_foot = 2 * (foot[0] * foot[1] + foot[1] * foot[2] + foot[0] * foot[2])
    pick = rng.random(n) < a_stem / (a_stem + a_foot)
    pts = np.empty((n, 3))
    pts[pick] = _sample_box(stem, int(pick.sum()), rng) + np.array([-sx * 0.275, 0.0, 0.0])
    pts[~pick] = _sample_box(foot, int((~pick).sum()), rng)
    return pts


_SHAPE_KINDS = ("box", "cylinder", "sphere", "lshape")


def _make_shape(scale: float, rng: np.random.Generator) -> _Shape:
    kind = _SHAPE_KINDS[rng.integers(len(_SHAPE_KINDS))]
    if kind == "sphere":
        d = 0.7 * scale
        dims = np.array([d, d, d])
    else:
        # furniture-like: the sampled scale is the max extent, others slimmer
        dims = scale * rng.uniform(0.35, 0.9, size=3)
        dims[np.argmax(dims)] = scale
    return _Shape(kind, dims)


def _world_aabb(shape: _Shape, pose: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    corners = pose.apply(shape.corners())
    return corners.min(axis=0), corners.max(axis=0)


def _footprint_ok(lo, hi, room_w, room_l) -> bool:
    return lo[0] >= 0 and lo[2] >= 0 and hi[0] <= room_w and hi[2] <= room_l


def _overlaps(lo, hi, others) -> bool:
    for olo, ohi in others:
        if (lo <= ohi).all() and (olo <= hi).all():
            return True
    return False


def _allocate_counts(areas: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation of point counts proportional to area."""
    raw = areas / areas.sum() * total
    counts = np.floor(raw).astype(np.int64)
    remainder = raw - counts
    short = total - counts.sum()
    order = np.argsort(-remainder, kind="stable")
    counts[order[:short]] += 1
    return counts


_AXES = (np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))


def _attempt_scene(cfg, rng, margin, per_object_tries, spend_rejection):
    """One full scene draw; returns None when it deadlocks (caller re-rolls)."""
    room_w = rng.uniform(*cfg.room_aspect)
    room_l = 1.0
    n_objects = int(rng.integers(cfg.num_objects[0], cfg.num_objects[1] + 1))
    shapes = [_make_shape(rng.uniform(*cfg.object_scale), rng) for _ in range(n_objects)]

    # Place large objects first; positions are drawn inside the feasible
    # rectangle for the drawn yaw so only object-object overlap can reject.
    order = sorted(range(n_objects), key=lambda k: -shapes[k].area())
    placed: dict[int, RigidTransform] = {}
    boxes: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for k in order:
        shape = shapes[k]
        for attempt in range(per_object_tries):
            yaw = np.deg2rad(rng.uniform(-180.0, 180.0))
            rot = rotation_about_axis(np.array([0.0, 1.0, 0.0]), yaw)
            lo0, hi0 = _world_aabb(shape, RigidTransform(rot, np.zeros(3)))
            x_lo, x_hi = margin - lo0[0], room_w - margin - hi0[0]
            z_lo, z_hi = margin - lo0[2], room_l - margin - hi0[2]
            if x_lo > x_hi or z_lo > z_hi:
                spend_rejection("placing objects")
                continue
            pos = np.array([rng.uniform(x_lo, x_hi), 0.0, rng.uniform(z_lo, z_hi)])
            pose = RigidTransform(rot, pos)
            lo, hi = _world_aabb(shape, pose)
            inflated = (lo - margin, hi + margin)
            if not _overlaps(*inflated, list(boxes.values())):
                placed[k] = pose
                boxes[k] = (lo, hi)
                break
            spend_rejection("placing objects")
        else:
            return None

    all_poses: list[list[RigidTransform]] = [[placed[k] for k in range(n_objects)]]
    for _ in range(1, cfg.frames):
        prev = all_poses[-1]
        current = list(prev)
        current_boxes = [_world_aabb(shapes[k], prev[k]) for k in range(n_objects)]
        for k in range(n_objects):
            for attempt in range(per_object_tries):
                axis = _AXES[rng.choice(3, p=cfg.rotation_axis_probs)]
                angle = np.deg2rad(rng.uniform(*cfg.step_rotation_deg))
                trans = np.array(
                    [rng.uniform(*cfg.step_translation), 0.0, rng.uniform(*cfg.step_translation)]
                )
                # rotate about the object's current bounding-box center
                lo, hi = current_boxes[k]
                center = (lo + hi) / 2
                rot = rotation_about_axis(axis, angle)
                step = RigidTransform(rot, center - rot @ center + trans)
                new_pose = step.compose(current[k])
                nlo, nhi = _world_aabb(shapes[k], new_pose)
                others = [current_boxes[j] for j in range(n_objects) if j != k]
                if _footprint_ok(nlo, nhi, room_w, room_l) and not _overlaps(nlo, nhi, others):
                    current[k] = new_pose
                    current_boxes[k] = (nlo, nhi)
                    break
                spend_rejection("stepping objects")
            else:
                return None
        all_poses.append(current)
    return room_w, room_l, shapes, all_poses


def generate_scene(cfg: SceneGenConfig) -> GeneratedScene:
    """Generate one dynamic scene; deterministic in cfg.seed.

    Raises GenerationFailed when placement/steps exceed cfg.max_rejections,
    which signals an over-packed configuration.
    """
    rng = np.random.default_rng(cfg.seed)
    rejections = [0]

    def spend_rejection(stage: str):
        rejections[0] += 1
        if rejections[0] > cfg.max_rejections:
            raise GenerationFailed(
                f"exceeded {cfg.max_rejections} rejections while {stage}"
            )

    # Whole-scene rejection: any layout or motion deadlock re-rolls the entire
    # scene (room, object count, shapes). A placement margin leaves objects
    # room to move in later frames.
    margin = 0.03
    per_object_tries = 40
    while True:
        attempt = _attempt_scene(cfg, rng, margin, per_object_tries, spend_rejection)
        if attempt is not None:
            room_w, room_l, shapes, all_poses = attempt
            break
    n_objects = len(shapes)

    areas = np.array([s.area() for s in shapes])
    counts = _allocate_counts(areas, cfg.points_per_frame)
    frames: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for t in range(cfg.frames):
        pts = [all_poses[t][k].apply(shapes[k].sample(counts[k], rng)) for k in range(n_objects)]
        frames.append(np.vstack(pts))
        labels.append(np.repeat(np.arange(n_objects), counts))

    gt_flows: list[np.ndarray] = []
    for t in range(cfg.frames - 1):
        flow = np.empty_like(frames[t])
        for k in range(n_objects):
            step = all_poses[t + 1][k].compose(all_poses[t][k].inverse())
            m = labels[t] == k
            flow[m] = step.apply(frames[t][m]) - frames[t][m]
        gt_flows.append(flow)

    return GeneratedScene(
        frames=tuple(frames),
        labels=tuple(labels),
        gt_flows=tuple(gt_flows),
        object_poses=tuple(tuple(p) for p in all_poses),
        scene_id=f"scene-{cfg.seed:08x}",
    )


def add_flow_noise(flow: np.ndarray, std: float, seed: int) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise per coordinate; deterministic per seed."""
    flow = check_flow(flow, np.asarray(flow).shape[0])
    if std < 0:
        raise ValueError("std must be nonnegative")
    if std == 0:
        return flow.copy()
    rng = np.random.default_rng(seed)
    return flow + rng.normal(0.0, std, size=flow.shape)


def add_flow_bias(flow: np.ndarray, labels: np.ndarray, std: float, seed: int) -> np.ndarray:
    """Add one constant random offset per object (correlated flow error).

    Mimics the regionally biased errors of learned flow estimators, which
    per-object rigid fitting cannot remove but geometry re-anchoring can.
    """
    flow = check_flow(flow, np.asarray(flow).shape[0])
    labels = np.asarray(labels, dtype=np.int64)
    if std < 0:
        raise ValueError("std must be nonnegative")
    if std == 0:
        return flow.copy()
    rng = np.random.default_rng(seed)
    out = flow.copy()
    for k in np.unique(labels):
        out[labels == k] += rng.normal(0.0, std, size=3)
    return out


def scene_to_pairs(scene: GeneratedScene, flow_noise_std: float = 0.0, noise_seed: int = 0) -> list[ScenePair]:
    """Consecutive-frame ScenePairs with ground truth attached.

    The working flow starts as the ground-truth flow, optionally corrupted by
    Gaussian noise.
    """
    pairs = []
    for t in range(scene.n_frames - 1):
        flow = scene.gt_flows[t]
        if flow_noise_std > 0:
            flow = add_flow_noise(flow, flow_noise_std, noise_seed + t)
        pairs.append(
            ScenePair(
                frame_t=scene.frames[t],
                frame_t1=scene.frames[t + 1],
                flow=flow,
                gt_labels_t=scene.labels[t],
                gt_labels_t1=scene.labels[t + 1],
                gt_flow=scene.gt_flows[t],
                scene_id=f"{scene.scene_id}:{t}",
            )
        )
    return pairs
