import json
from collections import Counter

import numpy as np
import pytest

from keysg.errors import CorruptSidecar, InconsistentIds, SchemaVersionMismatch, UnknownId
from keysg.graph import (
    KPC_MAGIC,
    KeyframeRecord,
    SceneGraph,
    assemble,
    decode_cloud,
    deserialize,
    encode_cloud,
    load_graph,
    save_graph,
    serialize,
)
from keysg.hierseg import FloorSlab, RoomRegion
from keysg.ingest import PointCloud, to_voxels
from keysg.objects import FunctionalElement, ObjectSegment, View
from keysg.providers.base import Embedding, TagResult
from keysg.synthgraph import random_graph


def rect(x0, y0, x1, y1):
    return [np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)]


def obj(i, centre, label="mug"):
    pts = np.asarray(centre, dtype=np.float64) + np.random.default_rng(i).uniform(-0.1, 0.1, (20, 3))
    cloud = PointCloud(pts)
    o = ObjectSegment(i, cloud, to_voxels(cloud, 0.05))
    o.views = [View(3, np.ones((2, 2), bool), 0.4, (0, 0, 2, 2)), View(1, np.ones((2, 2), bool), 0.4, (0, 0, 2, 2))]
    o.labels = Counter({label: 2})
    o.embedding = Embedding(np.r_[1.0, np.zeros(7)])
    return o


def small_scene(objects, rooms=None):
    floor = FloorSlab(0, -0.1, 2.9, PointCloud(np.zeros((3, 3))), 0.0)
    rooms = rooms or [RoomRegion(0, 0, np.ones((1, 1), bool), rect(0, 0, 4, 4))]
    kfs = {0: [KeyframeRecord(7, np.eye(4), description="Frame shows: mug", tags=TagResult(["mug"], ["handle"]))]}
    return assemble([floor], rooms, kfs, objects, {k: "ROOM SUMMARY: x" for k in range(len(rooms))}, {0: "FLOOR SUMMARY: x"})


def test_one_room_two_objects_tree():
    g = small_scene([obj(0, (1, 1, 0.5)), obj(1, (3, 3, 0.5), "cup")])
    nodes = list(g.traverse())
    assert [n.level for n in nodes] == ["building", "floor", "room", "object", "object"]
    assert g.counts() == {"floors": 1, "rooms": 1, "objects": 2, "functional": 0, "keyframes": 1}
    room = g.lookup("room_0_0")
    assert room.object_tags == ["mug"] and room.functional_tags == ["handle"]
    o = g.lookup("object_0000")
    assert o.containment == "inside" and o.best_view == 1 and g.parent(o.id) is room


def test_corridor_object_attaches_to_nearest_room():
    rooms = [RoomRegion(0, 0, np.ones((1, 1), bool), rect(0, 0, 4, 4)),
             RoomRegion(1, 0, np.ones((1, 1), bool), rect(5, 0, 9, 4))]
    g = small_scene([obj(0, (4.7, 2, 0.5))], rooms)
    o = g.lookup("object_0000")
    assert o.room == "room_0_1" and o.containment == "nearest"


def test_duplicate_object_id():
    with pytest.raises(InconsistentIds):
        small_scene([obj(0, (1, 1, 0.5)), obj(0, (2, 2, 0.5))])


def test_functional_children_get_ids():
    o = obj(0, (1, 1, 0.5))
    o.functional_elements = [FunctionalElement(0, 0, "handle", PointCloud(np.ones((2, 3))), 3)]
    g = small_scene([o])
    fe = g.lookup("object_0000_part_00")
    assert fe.parent == "object_0000" and g.children("room_0_0", "functional") == [fe]


def test_lookup_and_children():
    g = random_graph(40, seed=3)
    assert g.lookup("building") is g.building
    with pytest.raises(UnknownId):
        g.lookup("no-such")
    for fl in g.floors:
        assert len(g.children(fl, "room")) == len(fl.rooms)
        assert g.children(fl, "object") == [o for r in fl.rooms for o in r.objects]
    assert sum(len(r.keyframes) for r in g.rooms()) == len(g.keyframes())


def test_round_trip_is_byte_stable():
    g = random_graph(80, seed=5)
    a = serialize(g)
    b = serialize(deserialize(a))
    assert a == b
    doc = json.loads(a["graph.json"])
    assert doc["keysg_schema"] == 1


def test_round_trip_preserves_values():
    g = random_graph(30, seed=9)
    h = deserialize(serialize(g))
    for x, y in zip(g.objects(), h.objects()):
        assert x.id == y.id and x.label == y.label and x.views == y.views
        assert np.array_equal(x.cloud.points, y.cloud.points)
        assert (x.embedding is None and y.embedding is None) or np.array_equal(x.embedding, y.embedding)
        assert (x.cloud.colors is None) == (y.cloud.colors is None)
    for x, y in zip(g.keyframes(), h.keyframes()):
        assert np.array_equal(x.pose, y.pose) and x.tags == y.tags


def test_tampered_sidecar_detected():
    files = serialize(random_graph(10, seed=1))
    path = next(p for p in files if p.endswith(".kpc") and len(files[p]) > 16)
    blob = bytearray(files[path])
    blob[-1] ^= 0xFF
    files[path] = bytes(blob)
    with pytest.raises(CorruptSidecar):
        deserialize(files)


def test_missing_sidecar_detected():
    files = serialize(random_graph(10, seed=1))
    del files[next(p for p in files if p.endswith(".kpc"))]
    with pytest.raises(CorruptSidecar):
        deserialize(files)


def test_schema_version_checked():
    files = serialize(SceneGraph())
    doc = json.loads(files["graph.json"])
    doc["keysg_schema"] = 2
    files["graph.json"] = json.dumps(doc).encode()
    with pytest.raises(SchemaVersionMismatch):
        deserialize(files)


def test_empty_graph_minimal_document():
    files = serialize(SceneGraph())
    assert list(files) == ["graph.json"]
    doc = json.loads(files["graph.json"])
    assert doc == {"keysg_schema": 1, "metadata": {}, "building": {"id": "building", "floors": []}}
    assert deserialize(files).counts()["floors"] == 0


def test_kpc_layout():
    cloud = PointCloud(np.array([[1.0, 2.0, 3.0], [0.5, -0.25, 8.0]]), np.array([[1, 2, 3], [4, 5, 6]]))
    blob = encode_cloud(cloud, 0.05)
    assert blob[:4] == KPC_MAGIC and len(blob) == 16 + 2 * 12 + 2 * 3
    back = decode_cloud(blob)
    assert np.array_equal(back.points, cloud.points) and np.array_equal(back.colors, cloud.colors)
    with pytest.raises(CorruptSidecar):
        decode_cloud(blob[:-1])


def test_save_and_load(tmp_path):
    g = random_graph(25, seed=2)
    save_graph(g, tmp_path)
    assert (tmp_path / "graph.json").exists() and (tmp_path / "clouds").is_dir()
    assert serialize(load_graph(tmp_path)) == serialize(g)


def test_keyframe_in_two_rooms_rejected():
    g = random_graph(5, seed=4)
    rooms = g.rooms()
    kf = KeyframeRecord(999_999, np.eye(4))
    rooms[0].keyframes.append(kf)
    if len(rooms) > 1:
        rooms[1].keyframes.append(kf)
    else:
        rooms[0].keyframes.append(kf)
    with pytest.raises(InconsistentIds):
        SceneGraph(g.building)
