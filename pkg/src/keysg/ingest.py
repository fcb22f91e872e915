"""Posed RGB-D loading, pinhole back-projection and voxel utilities."""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import BadIntrinsics, BadPose, EmptyScene, MissingFile

_FRAME_RE = re.compile(r"^(\d{6})\.(png|txt)$")

# 21 bits per axis when packing voxel keys into one int64
_PACK_BITS = 21
_PACK_OFFSET = 1 << (_PACK_BITS - 1)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1000.0

    def __post_init__(self):
        ok = (
            self.fx > 0
            and self.fy > 0
            and 0 < self.cx < self.width
            and 0 < self.cy < self.height
            and self.depth_scale > 0
        )
        if not ok:
            raise BadIntrinsics(f"invalid intrinsics {self}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass
class PosedFrame:
    index: int
    pose: np.ndarray  # 4x4 camera-to-world
    depth: np.ndarray  # raw depth units, (H, W)
    color: np.ndarray | None = None  # (H, W, 3) uint8
    path: str | None = None  # color image path relative to the sequence root

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3]


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors must align with points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))

    def select(self, mask: np.ndarray) -> "PointCloud":
        colors = None if self.colors is None else self.colors[mask]
        return PointCloud(self.points[mask], colors)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @staticmethod
    def concat(clouds: Sequence["PointCloud"]) -> "PointCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return PointCloud.empty()
        pts = np.concatenate([c.points for c in clouds])
        if all(c.colors is not None for c in clouds):
            return PointCloud(pts, np.concatenate([c.colors for c in clouds]))
        return PointCloud(pts)


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel index of every point, with the global origin at (0, 0, 0)."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def _key_ids(keys: np.ndarray) -> np.ndarray:
    """1-D sortable identifiers for (N, 3) keys: packed int64 when in range."""
    keys = np.ascontiguousarray(keys, dtype=np.int64).reshape(-1, 3)
    if len(keys) == 0:
        return np.zeros(0, dtype=np.int64)
    if keys.min() >= -_PACK_OFFSET and keys.max() < _PACK_OFFSET:
        k = keys + _PACK_OFFSET
        return (k[:, 0] << (2 * _PACK_BITS)) | (k[:, 1] << _PACK_BITS) | k[:, 2]
    return keys.view(np.dtype((np.void, 24))).ravel()


def _unpack_ids(ids: np.ndarray) -> np.ndarray:
    if ids.dtype.kind == "V":
        return ids.view(np.int64).reshape(-1, 3).copy()
    mask = (1 << _PACK_BITS) - 1
    out = np.stack([(ids >> (2 * _PACK_BITS)) & mask, (ids >> _PACK_BITS) & mask, ids & mask], axis=1)
    return out - _PACK_OFFSET


@dataclass
class VoxelSet:
    """Set of occupied voxel indices on the shared global lattice."""

    voxel_size: float
    ids: np.ndarray = field(repr=False)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")

    @classmethod
    def from_keys(cls, keys: np.ndarray, voxel_size: float) -> "VoxelSet":
        return cls(voxel_size, np.unique(_key_ids(keys)))

    @property
    def keys(self) -> np.ndarray:
        return _unpack_ids(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def _check(self, other: "VoxelSet") -> None:
        if other.voxel_size != self.voxel_size:
            raise ValueError("voxel sets use different voxel sizes")
        if other.ids.dtype != self.ids.dtype and len(self) and len(other):
            raise ValueError("voxel sets use incompatible key encodings")

    def intersection_size(self, other: "VoxelSet") -> int:
        self._check(other)
        if not len(self) or not len(other):
            return 0
        return int(len(np.intersect1d(self.ids, other.ids, assume_unique=True)))

    def union(self, other: "VoxelSet") -> "VoxelSet":
        self._check(other)
        if not len(self):
            return VoxelSet(self.voxel_size, other.ids.copy())
        if not len(other):
            return VoxelSet(self.voxel_size, self.ids.copy())
        return VoxelSet(self.voxel_size, np.union1d(self.ids, other.ids))

    def intersection(self, other: "VoxelSet") -> "VoxelSet":
        self._check(other)
        if not len(self) or not len(other):
            return VoxelSet(self.voxel_size, self.ids[:0])
        return VoxelSet(self.voxel_size, np.intersect1d(self.ids, other.ids, assume_unique=True))

    def contains(self, keys: np.ndarray) -> np.ndarray:
        return np.isin(_key_ids(keys), self.ids)


def to_voxels(cloud: PointCloud, voxel_size: float) -> VoxelSet:
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    return VoxelSet.from_keys(voxel_keys(cloud.points, voxel_size), voxel_size)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """One centroid per occupied voxel, ordered by voxel id.

    Points are sorted by (voxel, x, y, z) before summation, so the result does
    not depend on the input order.
    """
    if len(cloud) == 0:
        return PointCloud.empty()
    pts = cloud.points
    ids = _key_ids(voxel_keys(pts, voxel_size))
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], ids))
    ids, pts = ids[order], pts[order]
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    counts = np.diff(np.r_[starts, len(ids)])
    sums = np.add.reduceat(pts, starts, axis=0)
    centroids = sums / counts[:, None]
    colors = None
    if cloud.colors is not None:
        csum = np.add.reduceat(cloud.colors[order].astype(np.float64), starts, axis=0)
        colors = np.rint(csum / counts[:, None]).astype(np.uint8)
    return PointCloud(centroids, colors)


def validate_pose(pose: np.ndarray, tol: float = 1e-5) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4) or not np.all(np.isfinite(pose)):
        raise BadPose("pose must be a finite 4x4 matrix")
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0], atol=tol):
        raise BadPose("pose bottom row must be [0 0 0 1]")
    rot = pose[:3, :3]
    if np.abs(rot @ rot.T - np.eye(3)).max() >= tol:
        raise BadPose("pose rotation block is not orthonormal")
    if np.linalg.det(rot) <= 0:
        raise BadPose("pose rotation has negative determinant (reflection)")
    return pose


def read_intrinsics(path: Path) -> Intrinsics:
    if not path.is_file():
        raise MissingFile(f"missing intrinsics file {path}")
    parts = path.read_text().split()
    if len(parts) != 7:
        raise BadIntrinsics(f"{path}: expected 7 values, got {len(parts)}")
    try:
        fx, fy, cx, cy, w, h, scale = (float(p) for p in parts)
    except ValueError as exc:
        raise BadIntrinsics(f"{path}: {exc}") from None
    return Intrinsics(fx, fy, cx, cy, int(w), int(h), scale)


def read_pose(path: Path) -> np.ndarray:
    try:
        values = [float(v) for v in path.read_text().split()]
    except ValueError as exc:
        raise BadPose(f"{path}: {exc}") from None
    if len(values) != 16:
        raise BadPose(f"{path}: expected 16 values, got {len(values)}")
    try:
        return validate_pose(np.array(values).reshape(4, 4))
    except BadPose as exc:
        raise BadPose(f"{path}: {exc}") from None


def _frame_indices(directory: Path, suffix: str) -> dict[int, Path]:
    if not directory.is_dir():
        raise MissingFile(f"missing directory {directory}")
    found = {}
    for entry in directory.iterdir():
        m = _FRAME_RE.match(entry.name)
        if m and m.group(2) == suffix:
            found[int(m.group(1))] = entry
    return found


def load_sequence(root: str | Path) -> tuple[list[PosedFrame], Intrinsics]:
    """Load ``<root>/{intrinsics.txt,color/,depth/,poses/}`` into memory."""
    root = Path(root)
    intr = read_intrinsics(root / "intrinsics.txt")
    colors = _frame_indices(root / "color", "png")
    depths = _frame_indices(root / "depth", "png")
    poses = _frame_indices(root / "poses", "txt")
    indices = set(colors) | set(depths) | set(poses)
    for name, stream in (("color", colors), ("depth", depths), ("poses", poses)):
        missing = sorted(indices - set(stream))
        if missing:
            raise MissingFile(f"{name} stream is missing frame(s) {missing[:5]}")
    if not indices:
        raise MissingFile(f"no frames found under {root}")

    frames = []
    for idx in sorted(indices):
        depth = np.asarray(Image.open(depths[idx]))
        if depth.shape != intr.shape:
            raise BadIntrinsics(
                f"depth {depths[idx].name} has shape {depth.shape}, intrinsics say {intr.shape}"
            )
        color = np.asarray(Image.open(colors[idx]).convert("RGB"))
        if color.shape[:2] != intr.shape:
            raise BadIntrinsics(f"color {colors[idx].name} does not match intrinsics dims")
        frames.append(
            PosedFrame(
                index=idx,
                pose=read_pose(poses[idx]),
                depth=depth,
                color=color,
                path=str(colors[idx].relative_to(root)),
            )
        )
    return frames, intr


def write_sequence(root: str | Path, frames: Iterable[PosedFrame], intr: Intrinsics) -> None:
    """Inverse of :func:`load_sequence` (used by the synthetic generators)."""
    root = Path(root)
    for sub in ("color", "depth", "poses"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "intrinsics.txt").write_text(
        f"{intr.fx!r} {intr.fy!r} {intr.cx!r} {intr.cy!r} {intr.width} {intr.height} {intr.depth_scale!r}\n"
    )
    for f in frames:
        name = f"{f.index:06d}"
        Image.fromarray(np.asarray(f.depth, dtype=np.uint16)).save(root / "depth" / f"{name}.png")
        color = f.color if f.color is not None else np.zeros(intr.shape + (3,), np.uint8)
        Image.fromarray(np.asarray(color, dtype=np.uint8)).save(root / "color" / f"{name}.png")
        rows = "\n".join(" ".join(repr(float(v)) for v in row) for row in f.pose)
        (root / "poses" / f"{name}.txt").write_text(rows + "\n")


def pixel_grid(intr: Intrinsics, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0 : intr.height : stride, 0 : intr.width : stride]
    return u.ravel(), v.ravel()


def camera_to_world(points_cam: np.ndarray, pose: np.ndarray) -> np.ndarray:
    return points_cam @ pose[:3, :3].T + pose[:3, 3]


def unproject(u: np.ndarray, v: np.ndarray, depth_m: np.ndarray, intr: Intrinsics) -> np.ndarray:
    x = (u - intr.cx) * depth_m / intr.fx
    y = (v - intr.cy) * depth_m / intr.fy
    return np.stack([x, y, depth_m], axis=1)


def backproject(
    frame: PosedFrame,
    intr: Intrinsics,
    stride: int = 4,
    max_depth: float | None = None,
    mask: np.ndarray | None = None,
) -> PointCloud:
    """World-frame points for every ``stride``-th pixel with valid depth.

    ``mask`` optionally restricts back-projection to a boolean pixel mask.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    depth = np.asarray(frame.depth)
    u, v = pixel_grid(intr, stride)
    raw = depth[v, u].astype(np.float64)
    keep = raw > 0
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)[v, u]
    d = raw[keep] / intr.depth_scale
    u, v = u[keep], v[keep]
    if max_depth is not None:
        near = d <= max_depth
        d, u, v = d[near], u[near], v[near]
    pts = camera_to_world(unproject(u.astype(np.float64), v.astype(np.float64), d, intr), frame.pose)
    colors = None if frame.color is None else np.asarray(frame.color)[v, u]
    return PointCloud(pts, colors)


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def fuse_scene(
    frames: Sequence[PosedFrame],
    intr: Intrinsics,
    voxel_size: float,
    stride: int = 4,
    max_depth: float | None = None,
    jobs: int = 1,
) -> PointCloud:
    """Voxel-downsampled union of all frame back-projections."""
    if not frames:
        raise EmptyScene("no frames to fuse")
    clouds = _map(lambda f: backproject(f, intr, stride, max_depth), list(frames), jobs)
    merged = PointCloud.concat(clouds)
    if len(merged) == 0:
        raise EmptyScene("no valid depth in any frame")
    return voxel_downsample(merged, voxel_size)
