"""Per-room keyframe selection: frame assignment, projection filtering,
standardised 7D pose features, DBSCAN and cluster medoids."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import EmptyRoom
from .hierseg import FloorSlab, RoomRegion, point_in_polygon
from .ingest import Intrinsics, PosedFrame, VoxelSet, backproject, to_voxels, validate_pose

SIGMA_FLOOR = 1e-12


@dataclass
class PoseFeature:
    frame_index: int
    vector: np.ndarray  # (tx, ty, tz, w*qw, w*qx, w*qy, w*qz)
    w: float


@dataclass
class StandardizedFeatures:
    frame_indices: np.ndarray
    matrix: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def rows(self, frame_indices) -> np.ndarray:
        lookup = {int(f): i for i, f in enumerate(self.frame_indices)}
        return np.array([lookup[int(f)] for f in frame_indices], dtype=np.int64)


@dataclass
class ClusterSet:
    clusters: list[list[int]]
    noise: list[int]
    eps: float
    min_pts: int


@dataclass
class RoomFrameSets:
    room: int
    candidates: list[int] = field(default_factory=list)  # inside the room volume
    dense: list[int] = field(default_factory=list)  # after projection filtering
    keyframes: list[int] = field(default_factory=list)
    eta: float = 0.5
    flags: list[str] = field(default_factory=list)


def assign_frames(
    frames: Sequence[PosedFrame],
    rooms: Sequence[RoomRegion],
    floors: Sequence[FloorSlab],
) -> list[RoomFrameSets]:
    """Bucket frames by the room whose volume contains the camera centre.

    Rooms are tested in order; a frame joins the first room that contains it.
    """
    sets = [RoomFrameSets(room=k) for k in range(len(rooms))]
    if not frames:
        return sets
    centers = np.array([f.position for f in frames])
    owner = np.full(len(frames), -1)
    floor_by_index = {f.index: f for f in floors}
    for k, room in enumerate(rooms):
        floor = floor_by_index[room.floor_index]
        free = owner < 0
        hit = free & floor.contains_z(centers[:, 2])
        if hit.any():
            idx = np.flatnonzero(hit)
            hit[idx] = point_in_polygon(centers[idx, :2], room.polygon)
        owner[hit] = k
    for frame, k in zip(frames, owner):
        if k >= 0:
            sets[k].candidates.append(frame.index)
    return sets


def projection_ratio(frame: PosedFrame, polygon, intr: Intrinsics, stride: int = 4) -> float:
    cloud = backproject(frame, intr, stride)
    if len(cloud) == 0:
        return 0.0
    return float(point_in_polygon(cloud.points[:, :2], polygon).mean())


def filter_by_projection(
    frames: Sequence[PosedFrame],
    polygon,
    intr: Intrinsics,
    eta: float = 0.5,
    stride: int = 4,
) -> list[int]:
    """Keep frames whose back-projected points fall inside ``polygon`` at rate >= eta."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if eta == 0.0:
        return [f.index for f in frames]
    return [f.index for f in frames if projection_ratio(f, polygon, intr, stride) >= eta]


def canonical_quaternion(rotation: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0; if w == 0 the first nonzero entry is positive."""
    x, y, z, w = Rotation.from_matrix(rotation).as_quat()
    q = np.array([w, x, y, z])
    if abs(q[0]) < 1e-12:
        q[0] = 0.0
        lead = q[np.flatnonzero(np.abs(q) > 1e-12)[0]]
        if lead < 0:
            q = -q
    elif q[0] < 0:
        q = -q
    return q


def pose_features(pose: np.ndarray, w: float = 1.0, frame_index: int = -1) -> PoseFeature:
    if w < 0:
        raise ValueError("rotation weight must be non-negative")
    pose = validate_pose(pose)
    q = canonical_quaternion(pose[:3, :3])
    return PoseFeature(frame_index, np.concatenate([pose[:3, 3], w * q]), w)


def standardize(features: Sequence[PoseFeature]) -> StandardizedFeatures:
    if not features:
        raise ValueError("need at least one feature")
    F = np.array([f.vector for f in features], dtype=np.float64)
    mu = F.mean(axis=0)
    sigma = F.std(axis=0)
    sigma = np.where(sigma < SIGMA_FLOOR, 1.0, sigma)
    return StandardizedFeatures(
        frame_indices=np.array([f.frame_index for f in features], dtype=np.int64),
        matrix=(F - mu) / sigma,
        mean=mu,
        std=sigma,
    )


_UNVISITED, _NOISE = -2, -1


def dbscan(features: StandardizedFeatures, eps: float, min_pts: int) -> ClusterSet:
    """Density clustering; a point's neighbourhood includes itself (distance <= eps).

    Points are visited in ascending frame-index order and a border point stays
    with the first cluster that reaches it.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be > 0 and min_pts >= 1")
    order = np.argsort(features.frame_indices, kind="stable")
    X = features.matrix[order]
    fidx = features.frame_indices[order]
    n = len(X)
    neighbors = [sorted(nb) for nb in cKDTree(X).query_ball_point(X, eps)]
    core = np.array([len(nb) >= min_pts for nb in neighbors], dtype=bool)
    labels = np.full(n, _UNVISITED)
    n_clusters = 0
    for p in range(n):
        if labels[p] != _UNVISITED:
            continue
        if not core[p]:
            labels[p] = _NOISE
            continue
        c = n_clusters
        n_clusters += 1
        labels[p] = c
        queue = list(neighbors[p])
        head = 0
        while head < len(queue):
            q = queue[head]
            head += 1
            if labels[q] == _NOISE:
                labels[q] = c
            elif labels[q] == _UNVISITED:
                labels[q] = c
                if core[q]:
                    queue.extend(neighbors[q])
    clusters = [sorted(int(f) for f in fidx[labels == c]) for c in range(n_clusters)]
    noise = sorted(int(f) for f in fidx[labels == _NOISE])
    return ClusterSet(clusters, noise, eps, min_pts)


def distance_sums(X: np.ndarray, block: int = 512) -> np.ndarray:
    """Row-wise sum of Euclidean distances to every row of ``X``."""
    out = np.empty(len(X))
    for s in range(0, len(X), block):
        diff = X[s : s + block, None, :] - X[None, :, :]
        out[s : s + block] = np.sqrt((diff * diff).sum(axis=2)).sum(axis=1)
    return out


def medoid(cluster: Sequence[int], features: StandardizedFeatures) -> int:
    """Member minimising the summed distance to all members; ties go to the lowest frame index."""
    if len(cluster) == 0:
        raise ValueError("empty cluster")
    members = sorted(int(c) for c in cluster)
    X = features.matrix[features.rows(members)]
    return members[int(np.argmin(distance_sums(X)))]


def select_keyframes(
    poses: Mapping[int, np.ndarray],
    dense: Sequence[int],
    w: float = 1.0,
    eps: float = 0.8,
    min_pts: int = 3,
) -> tuple[list[int], ClusterSet]:
    """Medoid of every cluster plus every noise frame as a singleton keyframe."""
    if len(dense) == 0:
        raise EmptyRoom("no frames survived filtering")
    feats = standardize([pose_features(poses[i], w, i) for i in sorted(dense)])
    clusters = dbscan(feats, eps, min_pts)
    keys = [medoid(c, feats) for c in clusters.clusters] + list(clusters.noise)
    return sorted(keys), clusters


def frames_voxels(frames: Sequence[PosedFrame], intr: Intrinsics, voxel_size: float) -> VoxelSet:
    parts = [to_voxels(backproject(f, intr, 1), voxel_size).ids for f in frames]
    parts = [p for p in parts if len(p)]
    if not parts:
        return VoxelSet(voxel_size, np.zeros(0, dtype=np.int64))
    return VoxelSet(voxel_size, np.unique(np.concatenate(parts)))


def coverage(
    keyframes: Sequence[PosedFrame],
    dense: Sequence[PosedFrame],
    intr: Intrinsics,
    voxel_size: float = 0.05,
) -> float:
    """Share of the dense frames' voxels also observed by the keyframes (stride-1 back-projection)."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    full = frames_voxels(dense, intr, voxel_size)
    if len(full) == 0:
        raise EmptyRoom("dense frames observe nothing")
    if not keyframes:
        return 0.0
    seen = frames_voxels(keyframes, intr, voxel_size)
    return full.intersection_size(seen) / len(full)
