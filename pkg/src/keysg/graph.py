"""Five-level scene graph (building, floors, rooms, objects, functional elements),
assembly from pipeline outputs, and byte-stable serialization.

On disk a graph is ``graph.json`` plus ``clouds/<node-id>.kpc`` sidecars.
A sidecar is a 16-byte header (magic ``KPC1``, uint32 point count, float32
voxel size, uint32 flags; bit 0 = colors present) followed by little-endian
float32 xyz triples and, if flagged, uint8 rgb triples.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from .errors import CorruptSidecar, InconsistentIds, SchemaVersionMismatch, UnknownId
from .hierseg import FloorSlab, RoomRegion, point_in_polygon
from .ingest import PointCloud
from .providers.base import TagResult

SCHEMA_VERSION = 1
KPC_MAGIC = b"KPC1"
_KPC_HEADER = struct.Struct("<4sIfI")
LEVELS = ("building", "floor", "room", "object", "functional")


def floor_id(index: int) -> str:
    return f"floor_{index}"


def room_id(floor: int, index: int) -> str:
    return f"room_{floor}_{index}"


def object_id(index: int) -> str:
    return f"object_{index:04d}"


def functional_id(parent: str, index: int) -> str:
    return f"{parent}_part_{index:02d}"


def frame_id(index: int) -> str:
    return f"frame_{index:06d}"


@dataclass
class KeyframeRecord:
    index: int
    pose: np.ndarray
    color_path: str | None = None
    depth_path: str | None = None
    description: str = ""
    tags: TagResult = field(default_factory=TagResult)
    embedding: np.ndarray | None = None  # image embedding of the whole frame
    visible: list[str] = field(default_factory=list)  # object ids used for the description

    @property
    def id(self) -> str:
        return frame_id(self.index)


@dataclass
class FunctionalNode:
    id: str
    parent: str
    label: str
    cloud: PointCloud
    source_view: int

    level = "functional"


@dataclass
class ObjectNode:
    id: str
    room: str
    label: str
    cloud: PointCloud
    label_counts: dict[str, int] = field(default_factory=dict)
    views: list[dict] = field(default_factory=list)  # {"frame", "score", "box"}
    best_view: int | None = None
    embedding: np.ndarray | None = None
    functional: list[FunctionalNode] = field(default_factory=list)
    containment: str = "inside"  # inside | nearest

    level = "object"

    def centroid(self) -> np.ndarray:
        return self.cloud.centroid() if len(self.cloud) else np.zeros(3)


@dataclass
class RoomNode:
    id: str
    floor: str
    index: int
    polygon: list[np.ndarray]
    name: str = ""
    cloud: PointCloud = field(default_factory=PointCloud.empty)
    keyframes: list[KeyframeRecord] = field(default_factory=list)
    objects: list[ObjectNode] = field(default_factory=list)
    summary: str | None = None
    object_tags: list[str] = field(default_factory=list)
    functional_tags: list[str] = field(default_factory=list)
    dense_frames: list[int] = field(default_factory=list)
    coverage: float | None = None
    flags: list[str] = field(default_factory=list)

    level = "room"

    def __post_init__(self):
        self.name = self.name or self.id

    def area(self) -> float:
        from .hierseg import polygon_signed_area

        return float(abs(sum(polygon_signed_area(r) for r in self.polygon)))


@dataclass
class FloorNode:
    id: str
    index: int
    z_min: float
    z_max: float
    level_z: float = 0.0
    name: str = ""
    cloud: PointCloud = field(default_factory=PointCloud.empty)
    rooms: list[RoomNode] = field(default_factory=list)
    summary: str | None = None

    level = "floor"

    def __post_init__(self):
        self.name = self.name or self.id


@dataclass
class BuildingNode:
    id: str = "building"
    floors: list[FloorNode] = field(default_factory=list)

    level = "building"


class SceneGraph:
    """Read-only view over the hierarchy with an id index built once."""

    def __init__(self, building: BuildingNode | None = None, metadata: dict | None = None):
        self.building = building or BuildingNode()
        self.metadata = dict(metadata or {})
        self._index: dict[str, Any] = {}
        self._parent: dict[str, str | None] = {}
        self._reindex()

    def _reindex(self) -> None:
        index: dict[str, Any] = {}
        parent: dict[str, str | None] = {}

        def put(node, up):
            if node.id in index:
                raise InconsistentIds(f"duplicate node id {node.id!r}")
            index[node.id] = node
            parent[node.id] = up

        put(self.building, None)
        for fl in self.building.floors:
            put(fl, self.building.id)
            for rm in fl.rooms:
                put(rm, fl.id)
                for kf in rm.keyframes:
                    if kf.id in index:
                        raise InconsistentIds(f"keyframe {kf.id} referenced by two rooms")
                    index[kf.id] = kf
                    parent[kf.id] = rm.id
                for ob in rm.objects:
                    put(ob, rm.id)
                    for fe in ob.functional:
                        put(fe, ob.id)
        self._index, self._parent = index, parent

    # ------------------------------------------------------------ access

    @property
    def floors(self) -> list[FloorNode]:
        return self.building.floors

    def lookup(self, node_id: str):
        try:
            return self._index[node_id]
        except KeyError:
            raise UnknownId(f"no node {node_id!r}") from None

    def parent(self, node_id: str):
        self.lookup(node_id)
        up = self._parent[node_id]
        return None if up is None else self._index[up]

    def traverse(self) -> Iterator[Any]:
        """Depth-first over hierarchy nodes (keyframes excluded)."""
        yield self.building
        for fl in self.building.floors:
            yield fl
            for rm in fl.rooms:
                yield rm
                for ob in rm.objects:
                    yield ob
                    yield from ob.functional

    def children(self, node, level: str | None = None) -> list:
        """Descendants of ``node`` at ``level`` (direct children when level is None)."""
        if isinstance(node, str):
            node = self.lookup(node)
        direct = {
            "building": lambda n: n.floors,
            "floor": lambda n: n.rooms,
            "room": lambda n: n.objects,
            "object": lambda n: n.functional,
            "functional": lambda n: [],
        }
        kids = direct[node.level](node)
        if level is None:
            return list(kids)
        if level not in LEVELS:
            raise ValueError(f"unknown level {level!r}")
        if LEVELS.index(level) <= LEVELS.index(node.level):
            return []
        out = []
        for k in kids:
            out.extend([k] if k.level == level else self.children(k, level))
        return out

    def rooms(self) -> list[RoomNode]:
        return [r for f in self.floors for r in f.rooms]

    def objects(self) -> list[ObjectNode]:
        return [o for r in self.rooms() for o in r.objects]

    def keyframes(self) -> list[KeyframeRecord]:
        return [k for r in self.rooms() for k in r.keyframes]

    def counts(self) -> dict[str, int]:
        objs = self.objects()
        return {
            "floors": len(self.floors),
            "rooms": len(self.rooms()),
            "objects": len(objs),
            "functional": sum(len(o.functional) for o in objs),
            "keyframes": len(self.keyframes()),
        }


# ---------------------------------------------------------------- assembly


def _segment_distance(p: np.ndarray, rings: Sequence[np.ndarray]) -> float:
    best = np.inf
    for ring in rings:
        a = np.asarray(ring, dtype=np.float64)
        b = np.roll(a, -1, axis=0)
        ab = b - a
        denom = np.maximum((ab * ab).sum(axis=1), 1e-300)
        t = np.clip(((p - a) * ab).sum(axis=1) / denom, 0.0, 1.0)
        proj = a + t[:, None] * ab
        best = min(best, float(np.min(np.linalg.norm(proj - p, axis=1))))
    return best


def locate_point(xyz: np.ndarray, rooms: Sequence[RoomRegion], floors: Sequence[FloorSlab]) -> tuple[int, str]:
    """Position of the containing room in ``rooms`` and ``'inside'``, or the
    nearest room by polygon distance (same floor slab preferred) and ``'nearest'``."""
    if not rooms:
        raise InconsistentIds("no rooms to attach to")
    xyz = np.asarray(xyz, dtype=np.float64)
    by_floor = {f.index: f for f in floors}
    same_floor = []
    for k, room in enumerate(rooms):
        fl = by_floor.get(room.floor_index)
        if fl is None:
            raise InconsistentIds(f"room {k} names unknown floor {room.floor_index}")
        if fl.z_min <= xyz[2] < fl.z_max:
            same_floor.append(k)
            if point_in_polygon(xyz[None, :2], room.polygon)[0]:
                return k, "inside"
    pool = same_floor or list(range(len(rooms)))
    dists = [(_segment_distance(xyz[:2], rooms[k].polygon), k) for k in pool]
    return min(dists)[1], "nearest"


def assemble(
    floors: Sequence[FloorSlab],
    rooms: Sequence[RoomRegion],
    keyframes: Mapping[int, Sequence[KeyframeRecord]],
    objects: Sequence,
    room_summaries: Mapping[int, str],
    floor_summaries: Mapping[int, str],
    metadata: dict | None = None,
    room_extras: Mapping[int, dict] | None = None,
    room_names: Mapping[int, str] | None = None,
) -> SceneGraph:
    """Build the hierarchy.

    ``keyframes``, ``room_summaries`` and ``room_extras`` are keyed by the
    position of a room in ``rooms``; ``floor_summaries`` by floor index.
    ``objects`` are :class:`keysg.objects.ObjectSegment` instances; each is
    attached to the room containing its centroid (or the nearest room).
    """
    floor_nodes: dict[int, FloorNode] = {}
    for fl in sorted(floors, key=lambda f: f.index):
        if fl.index in floor_nodes:
            raise InconsistentIds(f"duplicate floor index {fl.index}")
        floor_nodes[fl.index] = FloorNode(
            floor_id(fl.index), fl.index, float(fl.z_min), float(fl.z_max), float(fl.level),
            cloud=fl.cloud, summary=floor_summaries.get(fl.index),
        )
    room_nodes: list[RoomNode] = []
    seen_rooms = set()
    for k, rr in enumerate(rooms):
        if rr.floor_index not in floor_nodes:
            raise InconsistentIds(f"room {k} names unknown floor {rr.floor_index}")
        rid = room_id(rr.floor_index, rr.index)
        if rid in seen_rooms:
            raise InconsistentIds(f"duplicate room id {rid}")
        seen_rooms.add(rid)
        kfs = sorted(keyframes.get(k, []), key=lambda r: r.index)
        extras = dict((room_extras or {}).get(k, {}))
        node = RoomNode(
            rid, floor_id(rr.floor_index), rr.index, [np.asarray(r, dtype=np.float64) for r in rr.polygon],
            name=(room_names or {}).get(k, ""), cloud=rr.cloud, keyframes=kfs, summary=room_summaries.get(k),
            object_tags=sorted({t for r in kfs for t in r.tags.object_tags}),
            functional_tags=sorted({t for r in kfs for t in r.tags.functional_tags}),
            dense_frames=sorted(extras.get("dense_frames", [])),
            coverage=extras.get("coverage"),
            flags=list(extras.get("flags", [])),
        )
        room_nodes.append(node)
        floor_nodes[rr.floor_index].rooms.append(node)

    seen_objects = set()
    for obj in objects:
        if obj.id in seen_objects:
            raise InconsistentIds(f"duplicate object id {obj.id}")
        seen_objects.add(obj.id)
    for obj in sorted(objects, key=lambda o: o.id):
        pos, how = locate_point(obj.cloud.centroid(), rooms, floors)
        room = room_nodes[pos]
        oid = object_id(obj.id)
        best = min(obj.views, key=lambda v: (-v.score, v.frame)).frame if obj.views else None
        node = ObjectNode(
            oid, room.id, obj.label, obj.cloud,
            label_counts=dict(sorted(obj.labels.items())),
            views=[{"frame": int(v.frame), "score": float(v.score), "box": [int(b) for b in v.box]} for v in obj.views],
            best_view=best,
            embedding=None if obj.embedding is None else np.asarray(obj.embedding.vector, dtype=np.float64),
            containment=how,
        )
        node.functional = [
            FunctionalNode(functional_id(oid, j), oid, fe.label, fe.cloud, int(fe.source_view))
            for j, fe in enumerate(obj.functional_elements)
        ]
        room.objects.append(node)
    md = dict(metadata or {})
    return SceneGraph(BuildingNode(floors=list(floor_nodes.values())), md)


# ---------------------------------------------------------------- sidecars


def encode_cloud(cloud: PointCloud, voxel: float = 0.0) -> bytes:
    n = len(cloud)
    flags = 1 if cloud.colors is not None and n else 0
    body = np.ascontiguousarray(cloud.points, dtype="<f4").tobytes()
    if flags:
        body += np.ascontiguousarray(cloud.colors, dtype=np.uint8).tobytes()
    return _KPC_HEADER.pack(KPC_MAGIC, n, float(voxel), flags) + body


def decode_cloud(data: bytes) -> PointCloud:
    if len(data) < _KPC_HEADER.size:
        raise CorruptSidecar("sidecar shorter than its header")
    magic, n, _voxel, flags = _KPC_HEADER.unpack_from(data)
    if magic != KPC_MAGIC:
        raise CorruptSidecar("bad sidecar magic")
    expect = _KPC_HEADER.size + 12 * n + (3 * n if flags & 1 else 0)
    if len(data) != expect:
        raise CorruptSidecar("sidecar length does not match its header")
    pts = np.frombuffer(data, dtype="<f4", count=3 * n, offset=_KPC_HEADER.size).reshape(n, 3).astype(np.float64)
    colors = None
    if flags & 1:
        colors = np.frombuffer(data, dtype=np.uint8, count=3 * n, offset=_KPC_HEADER.size + 12 * n).reshape(n, 3)
    return PointCloud(pts, colors)


# ---------------------------------------------------------------- (de)serialization


def _floats(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


class _Writer:
    def __init__(self, voxel: float):
        self.voxel = voxel
        self.files: dict[str, bytes] = {}

    def cloud(self, node_id: str, cloud: PointCloud) -> dict:
        blob = encode_cloud(cloud, self.voxel)
        path = f"clouds/{node_id}.kpc"
        self.files[path] = blob
        return {"path": path, "count": len(cloud), "sha256": hashlib.sha256(blob).hexdigest()}


def _kf_doc(kf: KeyframeRecord) -> dict:
    return {
        "index": int(kf.index),
        "pose": _floats(kf.pose),
        "color_path": kf.color_path,
        "depth_path": kf.depth_path,
        "description": kf.description,
        "tags": kf.tags.to_dict(),
        "embedding": None if kf.embedding is None else _floats(kf.embedding),
        "visible": list(kf.visible),
    }


def graph_to_doc(graph: SceneGraph, voxel: float = 0.05) -> tuple[dict, dict[str, bytes]]:
    w = _Writer(voxel)
    floors = []
    for fl in graph.floors:
        rooms = []
        for rm in fl.rooms:
            objs = []
            for ob in rm.objects:
                objs.append({
                    "id": ob.id,
                    "room": ob.room,
                    "label": ob.label,
                    "label_counts": dict(sorted(ob.label_counts.items())),
                    "views": ob.views,
                    "best_view": ob.best_view,
                    "embedding": None if ob.embedding is None else _floats(ob.embedding),
                    "containment": ob.containment,
                    "cloud": w.cloud(ob.id, ob.cloud),
                    "functional": [
                        {"id": fe.id, "parent": fe.parent, "label": fe.label,
                         "source_view": fe.source_view, "cloud": w.cloud(fe.id, fe.cloud)}
                        for fe in ob.functional
                    ],
                })
            rooms.append({
                "id": rm.id,
                "floor": rm.floor,
                "index": rm.index,
                "name": rm.name,
                "polygon": [_floats(r) for r in rm.polygon],
                "summary": rm.summary,
                "object_tags": list(rm.object_tags),
                "functional_tags": list(rm.functional_tags),
                "dense_frames": [int(i) for i in rm.dense_frames],
                "coverage": rm.coverage,
                "flags": list(rm.flags),
                "keyframes": [_kf_doc(k) for k in rm.keyframes],
                "objects": objs,
                "cloud": w.cloud(rm.id, rm.cloud),
            })
        floors.append({
            "id": fl.id,
            "index": fl.index,
            "name": fl.name,
            "z_min": fl.z_min,
            "z_max": fl.z_max,
            "level": fl.level_z,
            "summary": fl.summary,
            "rooms": rooms,
            "cloud": w.cloud(fl.id, fl.cloud),
        })
    doc = {
        "keysg_schema": SCHEMA_VERSION,
        "metadata": graph.metadata,
        "building": {"id": graph.building.id, "floors": floors},
    }
    return doc, w.files


def dumps_doc(doc: dict) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=True, allow_nan=False) + "\n").encode("utf-8")


def serialize(graph: SceneGraph, voxel: float = 0.05) -> dict[str, bytes]:
    """All files of the on-disk form, keyed by relative path (``graph.json`` included)."""
    doc, files = graph_to_doc(graph, voxel)
    out = {"graph.json": dumps_doc(doc)}
    out.update(sorted(files.items()))
    return out


def _cloud_from(ref: dict, files: Mapping[str, bytes]) -> PointCloud:
    try:
        blob = files[ref["path"]]
    except KeyError:
        raise CorruptSidecar(f"missing sidecar {ref.get('path')}") from None
    if hashlib.sha256(blob).hexdigest() != ref["sha256"]:
        raise CorruptSidecar(f"checksum mismatch for {ref['path']}")
    cloud = decode_cloud(blob)
    if len(cloud) != ref["count"]:
        raise CorruptSidecar(f"point count mismatch for {ref['path']}")
    return cloud


def _arr(x):
    return None if x is None else np.asarray(x, dtype=np.float64)


def deserialize(files: Mapping[str, bytes]) -> SceneGraph:
    try:
        doc = json.loads(files["graph.json"])
    except KeyError:
        raise CorruptSidecar("graph.json missing") from None
    version = doc.get("keysg_schema")
    if not isinstance(version, int) or version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"unsupported keysg_schema {version!r}")
    floors = []
    for fd in doc["building"]["floors"]:
        rooms = []
        for rd in fd["rooms"]:
            objs = []
            for od in rd["objects"]:
                objs.append(ObjectNode(
                    od["id"], od["room"], od["label"], _cloud_from(od["cloud"], files),
                    label_counts=dict(od["label_counts"]), views=od["views"], best_view=od["best_view"],
                    embedding=_arr(od["embedding"]), containment=od["containment"],
                    functional=[
                        FunctionalNode(fe["id"], fe["parent"], fe["label"], _cloud_from(fe["cloud"], files), fe["source_view"])
                        for fe in od["functional"]
                    ],
                ))
            kfs = [
                KeyframeRecord(
                    k["index"], np.asarray(k["pose"], dtype=np.float64), k["color_path"], k["depth_path"],
                    k["description"], TagResult.from_dict(k["tags"]), _arr(k["embedding"]), list(k["visible"]),
                )
                for k in rd["keyframes"]
            ]
            rooms.append(RoomNode(
                rd["id"], rd["floor"], rd["index"], [np.asarray(r, dtype=np.float64).reshape(-1, 2) for r in rd["polygon"]],
                name=rd["name"], cloud=_cloud_from(rd["cloud"], files), keyframes=kfs, objects=objs,
                summary=rd["summary"], object_tags=list(rd["object_tags"]), functional_tags=list(rd["functional_tags"]),
                dense_frames=list(rd["dense_frames"]), coverage=rd["coverage"], flags=list(rd["flags"]),
            ))
        floors.append(FloorNode(
            fd["id"], fd["index"], fd["z_min"], fd["z_max"], fd["level"], name=fd["name"],
            cloud=_cloud_from(fd["cloud"], files), rooms=rooms, summary=fd["summary"],
        ))
    return SceneGraph(BuildingNode(doc["building"]["id"], floors), doc.get("metadata", {}))


def save_graph(graph: SceneGraph, out_dir: str | Path, voxel: float = 0.05) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    for rel, blob in serialize(graph, voxel).items():
        path = out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
        written.append(path)
    return written


def load_graph(graph_dir: str | Path) -> SceneGraph:
    root = Path(graph_dir)
    if root.is_file():
        root = root.parent
    doc_path = root / "graph.json"
    if not doc_path.exists():
        raise FileNotFoundError(f"{doc_path} not found")

    class _Lazy(dict):
        def __missing__(self, key):
            p = root / key
            if not p.is_file():
                raise KeyError(key)
            blob = p.read_bytes()
            self[key] = blob
            return blob

    return deserialize(_Lazy({"graph.json": doc_path.read_bytes()}))
