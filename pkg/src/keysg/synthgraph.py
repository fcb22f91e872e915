"""Scene graphs built directly (no rendering): a planted retrieval fixture and
randomized graphs for serialization round-trips."""

from __future__ import annotations

import numpy as np

from .graph import (
    BuildingNode,
    FloorNode,
    FunctionalNode,
    KeyframeRecord,
    ObjectNode,
    RoomNode,
    SceneGraph,
    floor_id,
    functional_id,
    object_id,
    room_id,
)
from .ingest import PointCloud
from .providers.base import Provider, TagResult

# floor name -> [(room name, object labels)]
PLANTED_LAYOUT = [
    ("ground floor", [
        ("kitchen", ["oven", "sink", "fridge", "table", "chair"]),
        ("living room", ["sofa", "tv", "lamp", "table", "chair"]),
    ]),
    ("first floor", [
        ("bedroom", ["bed", "wardrobe", "lamp", "desk", "chair"]),
        ("bathroom", ["toilet", "sink", "shower", "mirror", "cabinet"]),
    ]),
]
QUERY_LEADS = ("", "where is ", "find ", "show me ", "locate ")
QUERY_TEMPLATE = "the {object} in the {room} on the {floor}"


def _box_cloud(rng: np.random.Generator, lo, hi, n: int) -> PointCloud:
    pts = rng.uniform(lo, hi, size=(n, 3))
    return PointCloud(pts.astype(np.float32).astype(np.float64))


def planted_graph(provider: Provider, seed: int = 0, storey: float = 3.0, room_size: float = 5.0):
    """Two floors, four rooms, twenty objects with mock-summarized texts.

    Room summaries come from ``provider.summarize`` over per-keyframe
    descriptions; floor summaries from the floor name plus its room
    summaries. Returns ``(graph, queries)`` where each query is
    ``(text, object id)``, 100 in total (20 objects x 5 phrasings).
    """
    rng = np.random.default_rng(seed)
    floors, targets = [], []
    n_obj = 0
    for f, (fname, rooms) in enumerate(PLANTED_LAYOUT):
        z0 = f * storey
        fnode = FloorNode(floor_id(f), f, z0 - 0.1, z0 + storey - 0.1, z0, name=fname)
        room_sums = []
        for r, (rname, labels) in enumerate(rooms):
            x0 = r * room_size
            poly = [np.array([[x0, 0.0], [x0 + room_size, 0.0], [x0 + room_size, room_size], [x0, room_size]])]
            rnode = RoomNode(room_id(f, r), fnode.id, r, poly, name=rname)
            for j, label in enumerate(labels):
                cx, cy = x0 + 0.5 + 0.9 * j, 0.5 + rng.uniform(0, room_size - 1.0)
                cloud = _box_cloud(rng, (cx, cy, z0), (cx + 0.4, cy + 0.4, z0 + 0.8), 40)
                oid = object_id(n_obj)
                n_obj += 1
                rnode.objects.append(
                    ObjectNode(oid, rnode.id, label, cloud, {label: 3}, embedding=provider.embed_text(label).vector)
                )
                targets.append((label, rname, fname, oid))
            halves = (labels[: len(labels) // 2 + 1], labels[len(labels) // 2 + 1 :])
            for k, seen in enumerate(halves):
                idx = 1000 * f + 10 * r + k
                desc = provider.describe_frame(None, seen)
                pose = np.eye(4)
                pose[:3, 3] = (x0 + room_size / 2, room_size / 2, z0 + 1.5)
                rnode.keyframes.append(
                    KeyframeRecord(idx, pose, description=desc, tags=TagResult(list(seen), []),
                                   embedding=provider.embed_text(desc).vector,
                                   visible=[o.id for o in rnode.objects if o.label in seen])
                )
            rnode.summary = provider.summarize([k.description for k in rnode.keyframes], "room")
            room_sums.append(rnode.summary)
            fnode.rooms.append(rnode)
        fnode.summary = provider.summarize([f"The {fname}."] + room_sums, "floor")
        floors.append(fnode)
    graph = SceneGraph(BuildingNode(floors=floors), {"fixture": "planted", "seed": seed})
    queries = [
        (lead + QUERY_TEMPLATE.format(object=label, room=rname, floor=fname), oid)
        for lead in QUERY_LEADS
        for label, rname, fname, oid in targets
    ]
    return graph, queries


_WORDS = ("chair", "table", "lamp", "mug", "sofa", "bed", "desk", "shelf", "door", "plant", "tv", "sink")


def random_graph(n_objects: int = 500, seed: int = 0, dim: int = 16, with_colors: bool = True) -> SceneGraph:
    """Randomized graph for round-trip tests.

    Every float is float32-representable (clouds and embeddings are stored
    as float32), so serialize -> deserialize is an exact identity.
    """
    rng = np.random.default_rng(seed)

    def f32(a):
        return np.asarray(a, dtype=np.float32).astype(np.float64)

    n_floors = int(rng.integers(1, 4))
    floors = []
    rooms: list[RoomNode] = []
    frame = 0
    for f in range(n_floors):
        fl = FloorNode(floor_id(f), f, float(f32(3.0 * f - 0.1)), float(f32(3.0 * f + 2.9)), float(f32(3.0 * f)),
                       name=f"floor {f}", summary=f"Floor {f} with {rng.integers(1, 9)} rooms.")
        for r in range(int(rng.integers(1, 5))):
            x0 = float(f32(rng.uniform(0, 20)))
            ring = f32([[x0, 0], [x0 + 4, 0], [x0 + 4, 3.5], [x0, 3.5]])
            room = RoomNode(room_id(f, r), fl.id, r, [ring], name=str(rng.choice(["", "kitchen", "office"])),
                            summary=f"Room {r} on floor {f}.", coverage=float(f32(rng.uniform())),
                            dense_frames=sorted(rng.choice(10_000, 5, replace=False).tolist()),
                            flags=["no_keyframes"] if rng.uniform() < 0.2 else [])
            for _ in range(int(rng.integers(0, 4))):
                pose = np.eye(4)
                pose[:3, 3] = f32(rng.normal(size=3))
                tags = TagResult(sorted(set(rng.choice(_WORDS, 3).tolist())), ["knob"] if rng.uniform() < 0.3 else [])
                emb = rng.normal(size=dim)
                room.keyframes.append(KeyframeRecord(
                    frame, pose, f"color/{frame:06d}.png", f"depth/{frame:06d}.png",
                    description=f"Frame shows: {', '.join(tags.object_tags)}", tags=tags,
                    embedding=f32(emb / np.linalg.norm(emb)) if rng.uniform() < 0.8 else None,
                ))
                frame += 1 + int(rng.integers(0, 5))
            room.object_tags = sorted({t for k in room.keyframes for t in k.tags.object_tags})
            room.functional_tags = sorted({t for k in room.keyframes for t in k.tags.functional_tags})
            fl.rooms.append(room)
            rooms.append(room)
        floors.append(fl)

    for i in range(n_objects):
        room = rooms[int(rng.integers(0, len(rooms)))]
        n = int(rng.integers(0, 60))
        pts = f32(rng.uniform(-5, 5, size=(n, 3)))
        colors = rng.integers(0, 256, size=(n, 3), dtype=np.uint8) if with_colors and rng.uniform() < 0.5 else None
        label = str(rng.choice(_WORDS))
        oid = object_id(i)
        emb = rng.normal(size=dim)
        obj = ObjectNode(
            oid, room.id, label, PointCloud(pts, colors),
            label_counts={label: int(rng.integers(1, 9)), str(rng.choice(_WORDS)): 1},
            views=[{"frame": int(v), "score": float(f32(rng.uniform())), "box": [0, 0, 8, 8]}
                   for v in sorted(rng.choice(1000, int(rng.integers(0, 3)), replace=False).tolist())],
            embedding=f32(emb / np.linalg.norm(emb)) if rng.uniform() < 0.9 else None,
            containment="nearest" if rng.uniform() < 0.1 else "inside",
        )
        obj.best_view = obj.views[0]["frame"] if obj.views else None
        for j in range(int(rng.integers(0, 3))):
            m = int(rng.integers(1, 10))
            obj.functional.append(FunctionalNode(functional_id(oid, j), oid, "knob", PointCloud(f32(rng.uniform(-1, 1, (m, 3)))),
                                                 int(rng.integers(0, 1000))))
        room.objects.append(obj)
    return SceneGraph(BuildingNode(floors=floors), {"fixture": "random", "seed": seed, "n_objects": n_objects})
