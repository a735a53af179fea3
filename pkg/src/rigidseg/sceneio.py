"""Bit-exact scene files, dataset manifests, and checkpoint helpers.

Frame file layout (little-endian):

    magic   4 bytes  'OGCS'
    version u32      (= 1)
    n       u32      point count (>= 1)
    flags   u32      bit 0: flow block, bit 1: labels block, bit 2: gt-flow block
    points  n x 3 f32
    flow    n x 3 f32   (optional)
    labels  n     u16   (optional)
    gt_flow n x 3 f32   (optional)

Coordinates are stored as 32-bit floats and widened to float64 on read; all
computation happens in float64. Every error names the byte offset at which
it was detected.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import BadMagic, MissingFlow, TruncatedFile, UnsupportedVersion
from .scene import ScenePair
from .scenegen import GeneratedScene

MAGIC = b"OGCS"
VERSION = 1
FLAG_FLOW = 1
FLAG_LABELS = 2
FLAG_GT_FLOW = 4

_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class Frame:
    """One stored point-cloud frame with its optional blocks."""

    points: np.ndarray
    flow: np.ndarray | None = None
    labels: np.ndarray | None = None
    gt_flow: np.ndarray | None = None

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def write_frame(
    path,
    points: np.ndarray,
    flow: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    gt_flow: np.ndarray | None = None,
) -> None:
    points = np.ascontiguousarray(points, dtype=np.float32)
    n = points.shape[0]
    if n < 1 or points.shape != (n, 3):
        raise ValueError(f"points must be (N, 3) with N >= 1, got {points.shape}")
    flags = 0
    blocks = [points.tobytes()]
    if flow is not None:
        flow = np.ascontiguousarray(flow, dtype=np.float32)
        if flow.shape != (n, 3):
            raise ValueError("flow block must match the point count")
        flags |= FLAG_FLOW
        blocks.append(flow.tobytes())
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ValueError("labels block must match the point count")
        if labels.min(initial=0) < 0 or labels.max(initial=0) > np.iinfo(np.uint16).max:
            raise ValueError("labels must fit in uint16")
        flags |= FLAG_LABELS
        blocks.append(np.ascontiguousarray(labels, dtype=np.uint16).tobytes())
    if gt_flow is not None:
        gt_flow = np.ascontiguousarray(gt_flow, dtype=np.float32)
        if gt_flow.shape != (n, 3):
            raise ValueError("gt_flow block must match the point count")
        flags |= FLAG_GT_FLOW
        blocks.append(gt_flow.tobytes())
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, flags))
        for b in blocks:
            fh.write(b)


def read_frame(path) -> Frame:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        if data[: min(4, len(data))] != MAGIC[: len(data)]:
            raise BadMagic(f"{path}: not a scene file", offset=0)
        raise TruncatedFile(f"{path}: header incomplete", offset=len(data))
    magic, version, n, flags = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: version {version} not supported", offset=4)
    if n < 1:
        raise TruncatedFile(f"{path}: header declares zero points", offset=8)

    offset = _HEADER.size

    def take(count: int, dtype, what: str) -> np.ndarray:
        nonlocal offset
        nbytes = count * np.dtype(dtype).itemsize
        if len(data) < offset + nbytes:
            raise TruncatedFile(f"{path}: {what} block incomplete", offset=len(data))
        out = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += nbytes
        return out

    points = take(n * 3, "<f4", "points").reshape(n, 3).astype(np.float64)
    flow = labels = gt_flow = None
    if flags & FLAG_FLOW:
        flow = take(n * 3, "<f4", "flow").reshape(n, 3).astype(np.float64)
    if flags & FLAG_LABELS:
        labels = take(n, "<u2", "labels").astype(np.int64)
    if flags & FLAG_GT_FLOW:
        gt_flow = take(n * 3, "<f4", "gt_flow").reshape(n, 3).astype(np.float64)
    return Frame(points=points, flow=flow, labels=labels, gt_flow=gt_flow)


def frame_pair_to_scene(frame_t: Frame, frame_t1: Frame, scene_id: str, path: str = "") -> ScenePair:
    """Assemble a ScenePair from two stored frames (frame_t must carry flow)."""
    if frame_t.flow is None:
        raise MissingFlow(f"{path or scene_id}: frame has no flow block but one is required")
    return ScenePair(
        frame_t=frame_t.points,
        frame_t1=frame_t1.points,
        flow=frame_t.flow,
        gt_labels_t=frame_t.labels,
        gt_labels_t1=frame_t1.labels,
        gt_flow=frame_t.gt_flow,
        scene_id=scene_id,
    )


# --------------------------------------------------------------------------
# dataset directory layout
#
#   <root>/manifest.json
#   <root>/scenes/<scene_id>/frame_00.ogcs, frame_01.ogcs, ...


def write_manifest(root, scenes: list[dict], config: dict, seed: int, version: str) -> None:
    payload = {"config": config, "scenes": scenes, "seed": seed, "tool_version": version}
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(root) -> dict:
    return json.loads((Path(root) / "manifest.json").read_text())


def write_generated_scene(
    root, scene: GeneratedScene, working_flows: list[np.ndarray] | None = None
) -> None:
    """Write one generated scene; frame t carries labels, gt flow and the
    working flow (defaults to the ground truth)."""
    scene_dir = Path(root) / "scenes" / scene.scene_id
    scene_dir.mkdir(parents=True, exist_ok=True)
    for t in range(scene.n_frames):
        flow = gt_flow = None
        if t < scene.n_frames - 1:
            gt_flow = scene.gt_flows[t]
            flow = working_flows[t] if working_flows is not None else gt_flow
        write_frame(
            scene_dir / f"frame_{t:02d}.ogcs",
            scene.frames[t],
            flow=flow,
            labels=scene.labels[t],
            gt_flow=gt_flow,
        )


def scene_ids(root) -> list[str]:
    return [s["id"] for s in read_manifest(root)["scenes"]]


def load_scene_frames(root, scene_id: str) -> list[Frame]:
    scene_dir = Path(root) / "scenes" / scene_id
    paths = sorted(scene_dir.glob("frame_*.ogcs"))
    return [read_frame(p) for p in paths]


def load_pairs(root, scene_id: str) -> list[ScenePair]:
    """Consecutive-frame pairs of one stored scene."""
    frames = load_scene_frames(root, scene_id)
    return [
        frame_pair_to_scene(frames[t], frames[t + 1], f"{scene_id}:{t}")
        for t in range(len(frames) - 1)
    ]


def load_dataset(root) -> list[ScenePair]:
    """All consecutive-frame pairs of every scene in the manifest."""
    pairs = []
    for sid in scene_ids(root):
        pairs.extend(load_pairs(root, sid))
    return pairs


def pair_file_stem(pair_id: str) -> str:
    """Filesystem-safe stem for a pair id like 'scene-0000002a:0'."""
    return pair_id.replace(":", "_t")
