"""3D object segments: mask lifting, greedy overlap merging, view scoring,
functional parts and keyframe visibility."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmptyMask, EmptySegment
from .ingest import Intrinsics, PointCloud, PosedFrame, VoxelSet, backproject, to_voxels, voxel_downsample
from .providers.base import Detection, Embedding, Provider

log = logging.getLogger(__name__)


@dataclass
class View:
    frame: int
    mask: np.ndarray
    score: float
    box: tuple[int, int, int, int]
    label: str = ""


@dataclass
class FunctionalElement:
    id: int
    parent: int
    label: str
    cloud: PointCloud
    source_view: int


@dataclass
class ObjectSegment:
    id: int
    cloud: PointCloud
    voxels: VoxelSet
    views: list[View] = field(default_factory=list)
    labels: Counter = field(default_factory=Counter)
    embedding: Embedding | None = None
    functional_elements: list[FunctionalElement] = field(default_factory=list)
    room: int | None = None

    @property
    def label(self) -> str:
        """Modal detection label; ties go to the alphabetically first label."""
        if not self.labels:
            return "object"
        top = max(self.labels.values())
        return min(k for k, v in self.labels.items() if v == top)

    def best(self) -> View:
        return best_view(self)


def lift_mask(detection: Detection, frame: PosedFrame, intr: Intrinsics) -> PointCloud:
    """World points of exactly the masked pixels with valid depth."""
    if detection.mask.shape != np.asarray(frame.depth).shape:
        raise ValueError("mask and depth dimensions differ")
    cloud = backproject(frame, intr, stride=1, mask=detection.mask)
    if len(cloud) == 0:
        raise EmptySegment(f"no valid depth under {detection.label!r} mask in frame {frame.index}")
    return cloud


def overlap_ratio(a: PointCloud | VoxelSet, b: PointCloud | VoxelSet, voxel: float = 0.05) -> float:
    """Shared voxels over the smaller voxel count."""
    va = a if isinstance(a, VoxelSet) else to_voxels(a, voxel)
    vb = b if isinstance(b, VoxelSet) else to_voxels(b, voxel)
    if len(va) == 0 or len(vb) == 0:
        raise EmptySegment("overlap of an empty segment")
    return va.intersection_size(vb) / min(len(va), len(vb))


def score_view(mask: np.ndarray, shape: tuple[int, int] | None = None) -> float:
    """Area fraction times a centrality factor (1 at the image centre, 0 on an edge).

    The centrality factor is ``2 * d / min(W, H)`` where ``d`` is the distance
    from the mask centroid (pixel centres at +0.5) to the nearest image edge.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = shape if shape is not None else mask.shape
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EmptyMask("cannot score an empty mask")
    cx = xs.mean() + 0.5
    cy = ys.mean() + 0.5
    d_edge = min(cx, w - cx, cy, h - cy)
    centrality = min(max(2.0 * d_edge / min(w, h), 0.0), 1.0)
    return float(len(xs) / (w * h) * centrality)


def best_view(obj: ObjectSegment) -> View:
    """Highest-scoring view, earliest frame on ties."""
    if not obj.views:
        raise ValueError(f"object {obj.id} has no views")
    return min(obj.views, key=lambda v: (-v.score, v.frame))


def _absorb(target: ObjectSegment, cloud: PointCloud, voxels: VoxelSet, voxel: float) -> None:
    target.cloud = voxel_downsample(PointCloud.concat([target.cloud, cloud]), voxel)
    target.voxels = target.voxels.union(voxels)


def _best_match(objects: list[ObjectSegment], voxels: VoxelSet, threshold: float) -> ObjectSegment | None:
    best, best_r = None, -1.0
    for obj in objects:  # ascending id, so strict '>' keeps the lowest id on ties
        r = obj.voxels.intersection_size(voxels) / min(len(obj.voxels), len(voxels))
        if r >= threshold and r > best_r:
            best, best_r = obj, r
    return best


def merge_objects(
    segments: Iterable[tuple[PointCloud, Detection, int]],
    threshold: float = 0.3,
    voxel: float = 0.05,
    consolidate: bool = True,
) -> list[ObjectSegment]:
    """Greedy incremental merge in frame order.

    Each segment joins the existing object with the highest overlap ratio
    at or above ``threshold`` (lowest id on ties) or founds a new object.
    Because objects grow, two objects can end up overlapping; the optional
    consolidation pass then folds the higher id into the lower until no
    pair reaches the threshold.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    ordered = sorted(enumerate(segments), key=lambda item: (item[1][2], item[0]))
    objects: list[ObjectSegment] = []
    for _, (cloud, det, frame) in ordered:
        if len(cloud) == 0:
            continue
        voxels = to_voxels(cloud, voxel)
        view = View(frame, det.mask, score_view(det.mask), det.box, det.label)
        target = _best_match(objects, voxels, threshold)
        if target is None:
            target = ObjectSegment(len(objects), voxel_downsample(cloud, voxel), voxels)
            objects.append(target)
        else:
            _absorb(target, cloud, voxels, voxel)
        target.views.append(view)
        target.labels[det.label] += 1
    if consolidate:
        objects = _consolidate(objects, threshold, voxel)
    for k, obj in enumerate(objects):
        obj.id = k
    return objects


def _consolidate(objects: list[ObjectSegment], threshold: float, voxel: float) -> list[ObjectSegment]:
    changed = True
    while changed:
        changed = False
        for i in range(len(objects)):
            for j in range(i + 1, len(objects)):
                a, b = objects[i], objects[j]
                if overlap_ratio(a.voxels, b.voxels) >= threshold:
                    _absorb(a, b.cloud, b.voxels, voxel)
                    a.views.extend(b.views)
                    a.views.sort(key=lambda v: v.frame)
                    a.labels.update(b.labels)
                    del objects[j]
                    changed = True
                    break
            if changed:
                break
    return objects


def attach_embedding(obj: ObjectSegment, image_of: Callable[[int], np.ndarray], provider: Provider) -> View:
    """Embed the best view's masked region and store it on the object."""
    view = best_view(obj)
    obj.embedding = provider.embed_image(image_of(view.frame), view.mask)
    return view


def mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EmptyMask("empty mask has no box")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def segment_functional_elements(
    obj: ObjectSegment,
    functional_tags: Sequence[str],
    frame: PosedFrame,
    intr: Intrinsics,
    provider: Provider,
    start_id: int = 0,
) -> list[FunctionalElement]:
    """Detect functional parts on the object's best view, inside the object's mask box.

    Detections whose box centre falls outside the box are discarded; the
    rest are clipped to the box and lifted to 3D.
    """
    tags = [t for t in functional_tags if t]
    if not tags:
        return []
    view = best_view(obj)
    if frame.index != view.frame:
        raise ValueError("frame is not the object's best view")
    x0, y0, x1, y1 = mask_box(view.mask)
    clip = np.zeros_like(view.mask)
    clip[y0:y1, x0:x1] = True
    out = []
    for det in provider.detect(frame.color, tags):
        bx0, by0, bx1, by1 = det.box
        mx, my = 0.5 * (bx0 + bx1), 0.5 * (by0 + by1)
        if not (x0 <= mx <= x1 and y0 <= my <= y1):
            continue
        clipped = Detection(det.label, det.box, det.mask & clip, det.score, det.caption)
        try:
            cloud = lift_mask(clipped, frame, intr)
        except EmptySegment as exc:
            log.info("skipping functional element: %s", exc)
            continue
        out.append(FunctionalElement(start_id + len(out), obj.id, det.label, cloud, view.frame))
    return out


def visible_fraction(points, frame: PosedFrame, intr: Intrinsics, depth_tol: float = 0.08) -> float:
    """Share of ``points`` that survive the depth-map visibility test in ``frame``.

    Per point: camera coords ``c = R^T (p - t)`` evaluated as explicit sums
    ``R[0,i]*d0 + R[1,i]*d1 + R[2,i]*d2``; culled if ``c_z <= 0``; pixel is
    ``floor(f * c / c_z + c0 + 0.5)``; culled outside the image; visible iff
    ``c_z < D`` or ``|c_z - D| <= depth_tol`` with ``D`` the depth in meters.
    """
    if depth_tol <= 0:
        raise ValueError("depth_tol must be positive")
    p = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        raise EmptySegment("visibility of an empty cloud")
    R = frame.pose[:3, :3]
    t = frame.pose[:3, 3]
    d0 = p[:, 0] - t[0]
    d1 = p[:, 1] - t[1]
    d2 = p[:, 2] - t[2]
    xc = R[0, 0] * d0 + R[1, 0] * d1 + R[2, 0] * d2
    yc = R[0, 1] * d0 + R[1, 1] * d1 + R[2, 1] * d2
    zc = R[0, 2] * d0 + R[1, 2] * d1 + R[2, 2] * d2
    front = zc > 0
    zs = np.where(front, zc, 1.0)
    u = np.floor(intr.fx * xc / zs + intr.cx + 0.5)
    v = np.floor(intr.fy * yc / zs + intr.cy + 0.5)
    ok = front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    ui = np.where(ok, u, 0).astype(np.int64)
    vi = np.where(ok, v, 0).astype(np.int64)
    D = np.asarray(frame.depth)[vi, ui].astype(np.float64) / intr.depth_scale
    visible = ok & ((zc < D) | (np.abs(zc - D) <= depth_tol))
    return float(np.count_nonzero(visible) / len(p))


def visible_objects(
    frame: PosedFrame,
    objects: Sequence[ObjectSegment],
    intr: Intrinsics,
    theta_vis: float = 0.25,
    depth_tol: float = 0.08,
) -> list[tuple[int, float]]:
    """(id, fraction) for objects at or above ``theta_vis``, most visible first (ties by id)."""
    if not 0.0 < theta_vis <= 1.0:
        raise ValueError("theta_vis must lie in (0, 1]")
    hits = []
    for obj in objects:
        if len(obj.cloud) == 0:
            continue
        f = visible_fraction(obj.cloud, frame, intr, depth_tol)
        if f >= theta_vis:
            hits.append((obj.id, f))
    hits.sort(key=lambda h: (-h[1], h[0]))
    return hits
