"""Synthetic box-world scenes with exact ground truth.

Scenes are unions of axis-aligned boxes (floor, walls, furniture, functional
parts). Depth and instance maps are rendered by exact ray/box intersection,
so every derived quantity (masks, visibility, room membership) has a known
answer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import Intrinsics, PointCloud, PosedFrame, write_sequence
from .providers.base import embed_fixture_id, read_fixture_id, rle_decode, rle_encode  # noqa: F401

WALL_HEIGHT = 2.5
WALL_THICKNESS = 0.1

_PALETTE = np.array(
    [
        [200, 200, 200], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
        [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
        [250, 190, 212], [0, 128, 128], [220, 190, 255], [170, 110, 40], [255, 250, 200],
        [128, 0, 0], [170, 255, 195], [128, 128, 0], [255, 215, 180], [0, 0, 128],
    ],
    dtype=np.uint8,
)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    label: str = "wall"
    kind: str = "structure"  # structure | object | functional
    instance: int = 0
    parent: int = 0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


@dataclass
class Scene:
    boxes: list[Box]
    rooms: list[tuple[float, float, float, float]] = field(default_factory=list)  # x0, y0, x1, y1
    room_names: list[str] = field(default_factory=list)

    def objects(self) -> list[Box]:
        return [b for b in self.boxes if b.kind == "object"]

    def functional(self) -> list[Box]:
        return [b for b in self.boxes if b.kind == "functional"]

    def by_instance(self) -> dict[int, Box]:
        return {b.instance: b for b in self.boxes if b.instance}


# ---------------------------------------------------------------- geometry


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, :3] = np.stack([right, down, fwd], axis=1)
    pose[:3, 3] = eye
    return pose


def yaw_pitch_pose(eye, yaw: float, pitch: float) -> np.ndarray:
    """Pose looking along heading ``yaw`` (rad, from +x) tilted down by ``pitch`` (rad)."""
    d = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), -np.sin(pitch)])
    return look_at(eye, np.asarray(eye, dtype=np.float64) + d)


def render(boxes: list[Box], pose: np.ndarray, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Depth (meters, 0 = no hit) and instance id per pixel."""
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    dirs_cam = np.stack(
        [(u.ravel() - intr.cx) / intr.fx, (v.ravel() - intr.cy) / intr.fy, np.ones(u.size)], axis=1
    )
    # ray parameter along an un-normalised direction with unit z equals depth
    dirs = dirs_cam @ pose[:3, :3].T
    origin = pose[:3, 3]
    lo = np.stack([b.lo for b in boxes])
    hi = np.stack([b.hi for b in boxes])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo[None, :, :] - origin) * inv[:, None, :]
        t2 = (hi[None, :, :] - origin) * inv[:, None, :]
    tnear = np.nanmax(np.minimum(t1, t2), axis=2)
    tfar = np.nanmin(np.maximum(t1, t2), axis=2)
    hit = (tnear <= tfar) & (tnear > 1e-6)
    t = np.where(hit, tnear, np.inf)
    best = np.argmin(t, axis=1)
    depth = t[np.arange(len(t)), best]
    ids = np.array([b.instance for b in boxes])[best]
    nohit = ~np.isfinite(depth)
    depth[nohit] = 0.0
    ids[nohit] = -1
    return depth.reshape(intr.shape), ids.reshape(intr.shape)


def box_surface_points(box: Box, spacing: float, faces: str = "all") -> np.ndarray:
    """Grid samples on the faces of ``box`` (``faces='top'`` for the upper face only)."""
    pts = []
    lo, hi = box.lo, box.hi
    axes = [np.arange(lo[i] + spacing / 2, hi[i], spacing) if hi[i] - lo[i] > spacing else np.array([0.5 * (lo[i] + hi[i])]) for i in range(3)]
    for axis in range(3):
        for side, value in (("lo", lo[axis]), ("hi", hi[axis])):
            if faces == "top" and not (axis == 2 and side == "hi"):
                continue
            others = [a for a in range(3) if a != axis]
            g0, g1 = np.meshgrid(axes[others[0]], axes[others[1]], indexing="ij")
            face = np.empty((g0.size, 3))
            face[:, axis] = value
            face[:, others[0]] = g0.ravel()
            face[:, others[1]] = g1.ravel()
            pts.append(face)
    return np.concatenate(pts)


# ---------------------------------------------------------------- floor plans


def partitioned_building(
    width: float,
    depth: float,
    splits: list[float],
    door_width: float = 1.0,
    door_y: float | None = None,
    z0: float = 0.0,
    height: float = WALL_HEIGHT,
    thickness: float = WALL_THICKNESS,
    full_walls: bool = False,
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> Scene:
    """Rectangle ``[0,width]x[0,depth]`` split at x positions in ``splits``.

    Each partition wall has a door gap of ``door_width`` centred at ``door_y``
    unless ``full_walls`` is set. ``offset`` translates the whole scene.
    """
    t = thickness
    boxes = [Box((0, 0, z0 - 0.05), (width, depth, z0), label="floor")]
    zl, zh = z0, z0 + height
    boxes += [
        Box((0, 0, zl), (width, t, zh)),
        Box((0, depth - t, zl), (width, depth, zh)),
        Box((0, 0, zl), (t, depth, zh)),
        Box((width - t, 0, zl), (width, depth, zh)),
    ]
    door_y = depth / 2 if door_y is None else door_y
    for x in splits:
        if full_walls:
            boxes.append(Box((x - t / 2, 0, zl), (x + t / 2, depth, zh)))
        else:
            boxes.append(Box((x - t / 2, 0, zl), (x + t / 2, door_y - door_width / 2, zh)))
            boxes.append(Box((x - t / 2, door_y + door_width / 2, zl), (x + t / 2, depth, zh)))
    edges = [0.0] + list(splits) + [width]
    rooms = [(edges[i], 0.0, edges[i + 1], depth) for i in range(len(edges) - 1)]
    return shift_scene(Scene(boxes, rooms), offset)


def scene_cloud(scene: Scene, spacing: float = 0.05) -> PointCloud:
    """Dense surface samples of every box (floors sampled on the top face only)."""
    pts = [
        box_surface_points(b, spacing, faces="top" if b.label == "floor" else "all")
        for b in scene.boxes
    ]
    return PointCloud(np.concatenate(pts))


def two_story_cloud(
    rng: np.random.Generator,
    size: tuple[float, float] = (8.0, 6.0),
    storey: float = 3.0,
    wall_density: float = 0.02,
) -> tuple[PointCloud, float]:
    """Two horizontal floor slabs (z in [0, .05] and [storey, storey+.05]) plus sparse walls.

    Returns the cloud and the ground-truth boundary height (the upper slab's base).
    """
    w, d = size
    n = int(w * d / 0.05**2)
    slabs = []
    for base in (0.0, storey):
        xy = rng.uniform([0, 0], [w, d], size=(n, 2))
        z = rng.uniform(base, base + 0.05, size=(n, 1))
        slabs.append(np.hstack([xy, z]))
    m = int(wall_density * n)
    walls = np.column_stack(
        [rng.choice([0.0, w], m), rng.uniform(0, d, m), rng.uniform(0.0, 2 * storey, m)]
    )
    return PointCloud(np.vstack(slabs + [walls])), storey


# ---------------------------------------------------------------- trajectories


def station_trajectory(
    rng: np.random.Generator,
    stations: list[tuple[np.ndarray, float, float]],
    frames_per_station: list[int] | int,
    pos_sigma: float = 0.01,
    angle_sigma: float = np.deg2rad(0.5),
) -> list[np.ndarray]:
    """Stop-and-look capture: a jittered dwell at every (eye, yaw, pitch) station."""
    if isinstance(frames_per_station, int):
        frames_per_station = [frames_per_station] * len(stations)
    poses = []
    for (eye, yaw, pitch), count in zip(stations, frames_per_station):
        for _ in range(count):
            e = np.asarray(eye) + rng.normal(0, pos_sigma, 3)
            poses.append(
                yaw_pitch_pose(e, yaw + rng.normal(0, angle_sigma), pitch + rng.normal(0, angle_sigma))
            )
    return poses


def ring_stations(
    center: tuple[float, float],
    radius: float,
    count: int,
    heights: tuple[float, float] = (1.3, 1.7),
    pitch: float = np.deg2rad(12.0),
    offset: float = 0.0,
) -> list[tuple[np.ndarray, float, float]]:
    """Stations on a circle, each looking outward, heights alternating in ``heights``."""
    out = []
    for k in range(count):
        a = offset + 2 * np.pi * k / count
        eye = np.array([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), heights[k % len(heights)]])
        out.append((eye, a, pitch))
    return out


def render_frames(scene: Scene, poses: list[np.ndarray], intr: Intrinsics, start: int = 0):
    """Yield (PosedFrame, instance map) with depth quantised to ``intr.depth_scale``."""
    for k, pose in enumerate(poses):
        depth_m, inst = render(scene.boxes, pose, intr)
        raw = np.rint(depth_m * intr.depth_scale).astype(np.uint16)
        color = _PALETTE[np.where(inst < 0, 0, inst % len(_PALETTE))]
        yield PosedFrame(index=start + k, pose=pose, depth=raw, color=color), inst


def single_room_sequence(
    n_frames: int = 2000,
    seed: int = 0,
    intr: Intrinsics | None = None,
) -> tuple[Scene, list[PosedFrame], Intrinsics]:
    """Stop-and-look capture of one 6 x 5 m room (the keyframe-compression fixture).

    The room is shifted by half a 5 cm voxel so its planar surfaces do not sit
    on voxel boundaries, where depth quantisation would split them across two
    voxel layers at random.
    """
    intr = intr or Intrinsics(80.0, 80.0, 80.0, 60.0, 160, 120, 1000.0)
    rng = np.random.default_rng(seed)
    shift = 0.025
    scene = partitioned_building(6.0, 5.0, [], offset=(shift, shift, shift))
    c = (3.0 + shift, 2.5 + shift)
    stations = ring_stations(c, 1.2, 12) + ring_stations(
        c, 0.3, 4, heights=(1.5,), pitch=np.deg2rad(35.0), offset=np.pi / 4
    )
    base, extra = divmod(n_frames, len(stations))
    counts = [base + (1 if k < extra else 0) for k in range(len(stations))]
    poses = station_trajectory(rng, stations, counts)
    frames = [f for f, _ in render_frames(scene, poses, intr)]
    return scene, frames, intr


# ---------------------------------------------------------------- occlusion fixture

OCCLUDED_FRAME = 3


def occlusion_scene(intr: Intrinsics | None = None):
    """Three boxes on a floor; from frame 3 a cabinet hides the plant behind it.

    Returns ``(scene, frames, instance maps, intr)``. Instances: 1 mug,
    2 plant (occluded in frame 3), 3 cabinet. Frames 0-2 and 4 see the
    plant from the side or from above.
    """
    intr = intr or Intrinsics(60.0, 60.0, 40.0, 30.0, 80, 60, 1000.0)
    boxes = [
        Box((-2.0, -4.0, -0.05), (8.0, 4.0, 0.0), label="floor"),
        Box((2.0, -1.5, 0.0), (2.4, -1.1, 0.5), label="mug", kind="object", instance=1),
        Box((4.0, -0.25, 0.0), (4.5, 0.25, 0.8), label="plant", kind="object", instance=2),
        Box((3.0, -0.6, 0.0), (3.2, 0.6, 1.4), label="cabinet", kind="object", instance=3),
    ]
    scene = Scene(boxes)
    poses = [
        look_at((4.25, -3.0, 1.2), (4.25, 0.0, 0.4)),
        look_at((6.5, -2.0, 1.5), (4.0, 0.0, 0.4)),
        look_at((4.25, 3.0, 1.2), (3.5, 0.0, 0.4)),
        yaw_pitch_pose((0.0, 0.0, 0.6), 0.0, np.deg2rad(3.0)),
        look_at((6.0, 0.0, 2.0), (4.0, 0.0, 0.3)),
    ]
    pairs = list(render_frames(scene, poses, intr))
    return scene, [f for f, _ in pairs], [m for _, m in pairs], intr


# ---------------------------------------------------------------- fixture scene


def _add_object(boxes, label, lo, hi, instance, kind="object", parent=0):
    boxes.append(Box(lo, hi, label=label, kind=kind, instance=instance, parent=parent))


def fixture_scene() -> Scene:
    """Three rooms (kitchen, living room, bedroom), 12 objects, 4 oven knobs.

    Shifted by half a voxel, like :func:`single_room_sequence`.
    """
    scene = partitioned_building(12.0, 6.0, [4.0, 8.0], door_width=1.0, door_y=3.0)
    scene.room_names = ["kitchen", "living room", "bedroom"]
    b = scene.boxes
    inst = iter(range(1, 100))
    # kitchen x in [0, 4]
    oven = next(inst)
    _add_object(b, "oven", (1.4, 5.3, 0.0), (2.4, 5.9, 0.9), oven)
    for k, x in enumerate((1.55, 1.8, 2.05, 2.3)):
        _add_object(b, "knob", (x - 0.05, 5.2, 0.7), (x + 0.05, 5.3, 0.8), next(inst), "functional", oven)
    _add_object(b, "fridge", (0.1, 0.1, 0.0), (0.9, 0.8, 1.8), next(inst))
    _add_object(b, "table", (2.4, 1.2, 0.0), (3.4, 2.0, 0.75), next(inst))
    _add_object(b, "sink", (3.2, 5.3, 0.0), (3.8, 5.9, 0.9), next(inst))
    # living room x in [4, 8]
    _add_object(b, "sofa", (4.6, 0.2, 0.0), (6.6, 1.1, 0.8), next(inst))
    _add_object(b, "tv", (5.2, 5.6, 0.5), (6.6, 5.9, 1.3), next(inst))
    _add_object(b, "lamp", (7.3, 0.4, 0.0), (7.7, 0.8, 1.6), next(inst))
    _add_object(b, "chair", (6.9, 3.9, 0.0), (7.4, 4.4, 0.9), next(inst))
    # bedroom x in [8, 12]
    _add_object(b, "bed", (9.5, 3.6, 0.0), (11.8, 5.8, 0.6), next(inst))
    _add_object(b, "wardrobe", (8.2, 0.1, 0.0), (9.4, 0.7, 2.0), next(inst))
    _add_object(b, "desk", (10.6, 0.2, 0.0), (11.8, 0.9, 0.75), next(inst))
    _add_object(b, "chair", (10.9, 1.1, 0.0), (11.4, 1.6, 0.9), next(inst))
    return shift_scene(scene, (0.025, 0.025, 0.025))


def shift_scene(scene: Scene, delta) -> Scene:
    """Translate every box and room rectangle by ``delta``."""
    d = np.asarray(delta, dtype=np.float64)
    for b in scene.boxes:
        b.lo = b.lo + d
        b.hi = b.hi + d
    scene.rooms = [(x0 + d[0], y0 + d[1], x1 + d[0], y1 + d[1]) for x0, y0, x1, y1 in scene.rooms]
    return scene


FIXTURE_QUERIES = [
    ("where is the oven", "oven", None),
    ("find the fridge", "fridge", None),
    ("where is the sink", "sink", None),
    ("the table in the kitchen", "table", None),
    ("where is the sofa", "sofa", None),
    ("show me the tv", "tv", None),
    ("the lamp near the sofa", "lamp", None),
    ("the chair near the tv", "chair", "living room"),
    ("the chair near the desk", "chair", "bedroom"),
    ("where is the wardrobe", "wardrobe", None),
]


def _fixture_stations(scene: Scene) -> list[tuple[np.ndarray, float, float]]:
    stations = []
    for x0, y0, x1, y1 in scene.rooms:
        cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
        stations += ring_stations((cx, cy), 0.6, 6, heights=(1.4, 1.6), pitch=np.deg2rad(20.0))
    return stations


def write_fixture_scene(
    root: str | Path,
    frames_per_station: int = 8,
    seed: int = 0,
    intr: Intrinsics | None = None,
    min_pixels: int = 12,
) -> dict:
    """Render the three-room fixture to ``root`` with mock-provider fixtures.

    Writes the standard input layout plus ``fixtures.json`` (per-frame tags and
    detections for the mock provider) and ``ground_truth.json`` (object
    clouds and planted queries). Returns the ground-truth document.
    """
    root = Path(root)
    intr = intr or Intrinsics(80.0, 80.0, 80.0, 60.0, 160, 120, 1000.0)
    rng = np.random.default_rng(seed)
    scene = fixture_scene()
    poses = station_trajectory(rng, _fixture_stations(scene), frames_per_station, pos_sigma=0.02, angle_sigma=np.deg2rad(1.0))
    boxes = scene.by_instance()

    frames, fixtures = [], {}
    gt_points: dict[int, list[np.ndarray]] = {}
    from .ingest import backproject  # local: avoids a cycle at import time

    for frame, inst in render_frames(scene, poses, intr):
        fid = f"fixture_{frame.index:06d}"
        frame.color = embed_fixture_id(frame.color, fid)
        frames.append(frame)
        entry = {"object_tags": [], "functional_tags": [], "detections": []}
        labels_here = []
        for iid in sorted(set(np.unique(inst).tolist()) - {-1, 0}):
            box = boxes[iid]
            mask = inst == iid
            gt_points.setdefault(iid, []).append(backproject(frame, intr, 1, mask=mask).points)
            if mask.sum() < min_pixels:
                continue
            ys, xs = np.nonzero(mask)
            entry["detections"].append(
                {
                    "label": box.label,
                    "box": [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1],
                    "mask_rle": rle_encode(mask),
                    "caption": box.label,
                    "score": 0.9,
                    "instance": iid,
                }
            )
            key = "functional_tags" if box.kind == "functional" else "object_tags"
            if box.label not in entry[key]:
                entry[key].append(box.label)
            if box.kind == "object":
                labels_here.append(box.label)
        entry["object_tags"].sort()
        entry["functional_tags"].sort()
        entry["caption"] = "a room with " + ", ".join(sorted(set(labels_here))) if labels_here else "an empty room"
        fixtures[fid] = entry
    write_sequence(root, frames, intr)
    (root / "fixtures.json").write_text(
        json.dumps({"version": 1, "shape": list(intr.shape), "frames": fixtures}, sort_keys=True)
    )

    from .ingest import voxel_downsample

    objects = []
    for iid, box in sorted(boxes.items()):
        pts = np.concatenate(gt_points.get(iid, [np.zeros((0, 3))]))
        cloud = voxel_downsample(PointCloud(pts), 0.02) if len(pts) else PointCloud.empty()
        rel = f"gt/{iid:03d}.npy"
        (root / "gt").mkdir(exist_ok=True)
        np.save(root / rel, cloud.points.astype(np.float32))
        room = next(
            (scene.room_names[k] for k, (x0, y0, x1, y1) in enumerate(scene.rooms) if x0 <= box.center[0] < x1),
            None,
        )
        objects.append(
            {"instance": iid, "label": box.label, "kind": box.kind, "parent": box.parent, "room": room, "cloud": rel}
        )
    queries = []
    for text, label, room in FIXTURE_QUERIES:
        match = [o for o in objects if o["label"] == label and o["kind"] == "object" and (room is None or o["room"] == room)]
        queries.append({"query": text, "instance": match[0]["instance"]})
    gt = {"objects": objects, "queries": queries, "rooms": scene.room_names}
    (root / "ground_truth.json").write_text(json.dumps(gt, indent=1, sort_keys=True))
    write_eval_gt(root / "gt", gt)
    return gt


def write_eval_gt(gt_dir: Path, gt: dict) -> None:
    """Per-task gt files for ``keysg eval`` (clouds relative to ``gt_dir``)."""
    by_inst = {o["instance"]: o for o in gt["objects"]}

    def item(o, **extra):
        return {"class": o["label"], "cloud": Path(o["cloud"]).name, **extra}

    docs = {
        "seg": [item(o) for o in gt["objects"] if o["kind"] == "object"],
        "func": [item(o) for o in gt["objects"] if o["kind"] == "functional"],
    }
    qs = []
    for q in gt["queries"]:
        spatial = any(w in q["query"].split() for w in ("near", "in", "on"))
        qs.append(item(by_inst[q["instance"]], query=q["query"], flags={"spatial": spatial}))
    docs["retrieval"] = docs["grounding"] = qs
    for name, items in docs.items():
        (gt_dir / f"{name}.json").write_text(json.dumps(items, indent=1, sort_keys=True))
