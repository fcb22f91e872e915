"""Typed chunk stores over the scene graph and hierarchical retrieval.

Scores are cosine similarities between float32-rounded unit vectors,
computed as the correctly rounded sum of the (exact) elementwise products,
so any two implementations of the full scan agree bit for bit. A BLAS
product only preselects candidates; it never decides a ranking.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import EmptyStore, MissingSummary, ParseFailure
from .graph import SceneGraph
from .providers.base import Provider, tokenize
from .providers.mock import cited_ids

log = logging.getLogger(__name__)

CHUNK_TYPES = ("floor", "room", "frame", "object")
VISUAL_STORES = ("keyframe_visual", "object_visual")
KVX_MAGIC = b"KVX1"
_KVX_HEADER = struct.Struct("<4sII")
# bound on |BLAS dot - exact dot| for unit vectors of dimension <= 1e4
_PRESELECT_SLACK = 1e-9


@dataclass
class Chunk:
    id: str
    type: str
    node: str
    text: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.type not in CHUNK_TYPES:
            raise ValueError(f"unknown chunk type {self.type!r}")
        if not self.text.strip():
            raise ValueError(f"chunk {self.id} has empty text")


def as_f32(v) -> np.ndarray:
    """Unit-normalise in float64, then round entries to float32 (kept as float64)."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero vector")
    return (v / n).astype(np.float32).astype(np.float64)


@dataclass
class Store:
    name: str
    ids: list[str]
    matrix: np.ndarray  # (n, d) float32-representable unit rows
    chunks: list[Chunk] | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(len(self.ids), -1) if self.ids else np.zeros((0, 0))
        self._row = {c: i for i, c in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, chunk_id: str) -> int:
        return self._row[chunk_id]

    def subset(self, ids: Sequence[str]) -> "Store":
        rows = [self._row[i] for i in ids]
        chunks = None if self.chunks is None else [self.chunks[r] for r in rows]
        return Store(self.name, list(ids), self.matrix[rows] if rows else np.zeros((0, self.matrix.shape[1] if self.matrix.ndim == 2 else 0)), chunks)

    def chunk(self, chunk_id: str) -> Chunk | None:
        return None if self.chunks is None else self.chunks[self._row[chunk_id]]


@dataclass
class RetrievalResult:
    ranked: list[tuple[str, float]]
    trace: dict = field(default_factory=dict)

    def top(self) -> str | None:
        return self.ranked[0][0] if self.ranked else None


@dataclass
class ChunkIndex:
    stores: dict[str, Store]
    by_node: dict[str, str] = field(default_factory=dict)  # node id -> chunk id

    def store(self, name: str) -> Store:
        return self.stores[name]

    def chunk(self, chunk_id: str) -> Chunk:
        kind = chunk_id.split(":", 1)[0]
        c = self.stores[kind].chunk(chunk_id)
        if c is None:
            raise KeyError(chunk_id)
        return c


# ---------------------------------------------------------------- chunking


def chunk_id(kind: str, node: str) -> str:
    return f"{kind}:{node}"


def chunk_graph(graph: SceneGraph) -> list[Chunk]:
    chunks = []
    for fl in graph.floors:
        if not fl.summary:
            raise MissingSummary(f"floor {fl.id} has no summary")
        chunks.append(Chunk(chunk_id("floor", fl.id), "floor", fl.id, fl.summary, {"name": fl.name}))
        for rm in fl.rooms:
            if not rm.summary:
                raise MissingSummary(f"room {rm.id} has no summary")
            chunks.append(Chunk(chunk_id("room", rm.id), "room", rm.id, rm.summary, {"floor": fl.id, "name": rm.name}))
            for kf in rm.keyframes:
                text = kf.description.strip()
                tags = kf.tags.object_tags + kf.tags.functional_tags
                if tags:
                    text = (text + " " if text else "") + "Tags: " + ", ".join(tags) + "."
                if not text:
                    text = f"Keyframe {kf.index} in {rm.name}."
                chunks.append(Chunk(chunk_id("frame", kf.id), "frame", kf.id, text, {"room": rm.id, "floor": fl.id}))
            for ob in rm.objects:
                text = f"{ob.label}. Room: {rm.name}."
                parts = sorted({fe.label for fe in ob.functional})
                if parts:
                    text += " Parts: " + ", ".join(parts) + "."
                others = sorted(k for k in ob.label_counts if k != ob.label)
                if others:
                    text += " Also detected as: " + ", ".join(others) + "."
                meta = {"room": rm.id, "floor": fl.id, "label": ob.label, "centroid": ob.centroid().tolist()}
                chunks.append(Chunk(chunk_id("object", ob.id), "object", ob.id, text, meta))
    return chunks


def build_index(
    chunks: Sequence[Chunk],
    provider: Provider,
    graph: SceneGraph | None = None,
    jobs: int = 1,
) -> ChunkIndex:
    """Embed every chunk text; add visual stores from the graph's keyframe and object embeddings."""
    stores = {}

    def embed_type(kind):
        cs = sorted((c for c in chunks if c.type == kind), key=lambda c: c.id)
        vecs = [provider.embed_text(c.text).vector for c in cs]
        mat = as_f32(np.array(vecs)) if vecs else np.zeros((0, 0))
        return kind, Store(kind, [c.id for c in cs], mat, cs)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(embed_type, CHUNK_TYPES))
    else:
        results = [embed_type(k) for k in CHUNK_TYPES]
    stores.update(results)
    if graph is not None:
        kf = sorted((k for k in graph.keyframes() if k.embedding is not None), key=lambda k: k.id)
        stores["keyframe_visual"] = Store(
            "keyframe_visual", [k.id for k in kf], as_f32(np.array([k.embedding for k in kf])) if kf else np.zeros((0, 0))
        )
        obs = sorted((o for o in graph.objects() if o.embedding is not None), key=lambda o: o.id)
        stores["object_visual"] = Store(
            "object_visual", [o.id for o in obs], as_f32(np.array([o.embedding for o in obs])) if obs else np.zeros((0, 0))
        )
    by_node = {c.node: c.id for c in chunks}
    return ChunkIndex(stores, by_node)


# ---------------------------------------------------------------- search


def exact_scores(matrix: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Correctly rounded dot products (products of float32 values are exact in float64)."""
    prods = matrix * q
    return np.array([math.fsum(r) for r in prods], dtype=np.float64)


def topk(store: Store, query, k: int) -> RetrievalResult:
    """Exact top-k by cosine; ties broken by lexicographic id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(store) == 0:
        raise EmptyStore(f"store {store.name!r} is empty")
    q = as_f32(query)
    n = len(store)
    k = min(k, n)
    approx = store.matrix @ q
    kth = np.partition(approx, n - k)[n - k]
    cand = np.flatnonzero(approx >= kth - _PRESELECT_SLACK)
    exact = exact_scores(store.matrix[cand], q)
    ids = [store.ids[i] for i in cand]
    order = sorted(range(len(cand)), key=lambda j: (-exact[j], ids[j]))[:k]
    return RetrievalResult([(ids[j], float(exact[j])) for j in order])


def _embed(provider: Provider, text: str) -> np.ndarray:
    return provider.embed_text(text).vector


def _level_pick(store: Store, ids: list[str], q: np.ndarray, width: int) -> tuple[list[str], list[tuple[str, float]]]:
    res = topk(store.subset(ids), q, len(ids))
    return [c for c, _ in res.ranked[:width]], res.ranked


def retrieve_hierarchical(
    query: str,
    graph: SceneGraph,
    index: ChunkIndex,
    provider: Provider,
    mode: str = "parsed",
    beam_width: int = 1,
    k: int | None = None,
) -> RetrievalResult:
    """Floor -> room -> object descent keeping the best ``beam_width`` at each level.

    parsed: each level is scored with the embedding of its decomposed part;
    a missing floor (or room) part skips that level. raw: the whole query
    embedding scores every level. A failed parse falls back to raw.
    """
    if mode not in ("parsed", "raw"):
        raise ValueError(f"unknown mode {mode!r}")
    trace: dict[str, Any] = {"mode": mode}
    parts = None
    if mode == "parsed":
        try:
            parts = provider.decompose_hierarchical(query)
            trace["parts"] = parts
        except ParseFailure as exc:
            trace["fallback"] = f"raw ({exc})"
    whole = _embed(provider, query) if parts is None else None

    def q_for(level: str):
        if parts is None:
            return whole
        text = parts.get(level)
        return None if text is None else _embed(provider, text)

    floors = index.stores["floor"]
    rooms = index.stores["room"]
    objects = index.stores["object"]
    if len(objects) == 0:
        raise EmptyStore("no object chunks")

    floor_ids = list(floors.ids)
    q = q_for("floor")
    if q is not None and floor_ids:
        floor_ids, ranked = _level_pick(floors, floor_ids, q, beam_width)
        trace["floor"] = {"selected": floor_ids, "scores": ranked}
    else:
        trace["floor"] = {"selected": floor_ids, "skipped": True}
    floor_nodes = {c.split(":", 1)[1] for c in floor_ids}

    room_ids = [c for c in rooms.ids if rooms.chunk(c).meta["floor"] in floor_nodes]
    q = q_for("room")
    if q is not None and room_ids:
        room_ids, ranked = _level_pick(rooms, room_ids, q, beam_width)
        trace["room"] = {"candidates": len(ranked), "selected": room_ids, "scores": ranked}
    else:
        trace["room"] = {"selected": room_ids, "skipped": True}
    room_nodes = {c.split(":", 1)[1] for c in room_ids}

    obj_ids = [c for c in objects.ids if objects.chunk(c).meta["room"] in room_nodes]
    trace["object"] = {"candidates": obj_ids}
    if not obj_ids:
        return RetrievalResult([], trace)
    q = q_for("object")
    res = topk(objects.subset(obj_ids), q, k or len(obj_ids))
    res.trace = trace
    return res


def _tokens(text: str) -> int:
    return len(tokenize(text))


def retrieve_multimodal(
    target: str,
    anchors: Sequence[str],
    graph: SceneGraph,
    index: ChunkIndex,
    provider: Provider,
    k: int = 5,
    token_budget: int = 4000,
    image_cost: int = 16,
) -> list[dict]:
    """Context bundle: target and anchor objects, keyframes and the path chunks.

    Path chunks (room and floor of the best target object) are always kept;
    the rest are admitted by descending score while the token budget lasts.
    """
    if not target.strip():
        raise ValueError("empty target")
    objects = index.stores["object"]
    tq = _embed(provider, target)
    items: dict[str, dict] = {}

    def add_objects(res: RetrievalResult, role: str):
        for cid, score in res.ranked:
            if cid in items:
                continue
            c = objects.chunk(cid)
            items[cid] = {
                "id": c.node, "chunk": cid, "type": "object", "role": role, "score": score, "text": c.text,
                "label": c.meta["label"], "centroid": c.meta["centroid"], "room": c.meta["room"],
            }

    target_res = topk(objects, tq, k)
    add_objects(target_res, "target")
    for a in anchors:
        if a.strip():
            add_objects(topk(objects, _embed(provider, a), k), "anchor")
    visual = index.stores.get("keyframe_visual")
    if visual is not None and len(visual):
        for fid, score in topk(visual, tq, k).ranked:
            items[f"image:{fid}"] = {"id": fid, "chunk": f"image:{fid}", "type": "image", "role": "keyframe", "score": score, "text": ""}

    path = []
    best = objects.chunk(target_res.ranked[0][0])
    for kind, node in (("room", best.meta["room"]), ("floor", best.meta["floor"])):
        cid = chunk_id(kind, node)
        c = index.stores[kind].chunk(cid)
        path.append({"id": node, "chunk": cid, "type": kind, "role": "path", "score": None, "text": c.text})

    ranked = sorted(items.values(), key=lambda it: (-it["score"], it["chunk"]))
    kept, used = [], 0
    for it in ranked:
        cost = image_cost if it["type"] == "image" else _tokens(it["text"])
        if used + cost > token_budget:
            continue
        kept.append(it)
        used += cost
    return kept + path


def answer(
    query: str,
    graph: SceneGraph,
    index: ChunkIndex,
    provider: Provider,
    k: int = 5,
    token_budget: int = 4000,
    image_cost: int = 16,
    parse: bool = True,
) -> dict[str, Any]:
    """Parse, retrieve and ask the provider for an answer citing node ids.

    With ``parse=False`` the whole query is the retrieval target. If the
    reply cites no id from the bundle, the best target object is returned
    as grounding and ``warning`` is set to ``'ungrounded'``.
    """
    if "object" not in index.stores or len(index.stores["object"]) == 0:
        raise EmptyStore("index has no objects")
    trace: dict[str, Any] = {}
    parsed = {"target": query, "anchors": []}
    if parse:
        try:
            parsed = provider.parse_query(query)
        except ParseFailure as exc:
            trace["parse_fallback"] = str(exc)
    trace["parsed"] = parsed
    bundle = retrieve_multimodal(parsed["target"], parsed["anchors"], graph, index, provider, k, token_budget, image_cost)
    trace["bundle"] = [{"id": b["id"], "type": b["type"], "role": b["role"], "score": b["score"]} for b in bundle]
    text = provider.generate_answer(query, bundle)
    allowed = {b["id"] for b in bundle}
    ids = [i for i in cited_ids(text) if i in allowed]
    out: dict[str, Any] = {"text": text, "node_ids": ids, "trace": trace}
    if not ids:
        top = next((b["id"] for b in bundle if b["role"] == "target"), None)
        out["node_ids"] = [top] if top else []
        out["warning"] = "ungrounded"
    return out


# ---------------------------------------------------------------- persistence


def encode_matrix(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix, dtype="<f4")
    rows, dim = (m.shape if m.ndim == 2 else (0, 0))
    return _KVX_HEADER.pack(KVX_MAGIC, rows, dim) + np.ascontiguousarray(m).tobytes()


def decode_matrix(data: bytes) -> np.ndarray:
    magic, rows, dim = _KVX_HEADER.unpack_from(data)
    if magic != KVX_MAGIC:
        raise ValueError("bad vector file magic")
    if len(data) != _KVX_HEADER.size + 4 * rows * dim:
        raise ValueError("vector file length does not match its header")
    return np.frombuffer(data, dtype="<f4", offset=_KVX_HEADER.size).reshape(rows, dim).astype(np.float64)


def _record(store: Store, i: int) -> dict:
    if store.chunks is not None:
        c = store.chunks[i]
        return {"id": c.id, "type": c.type, "node": c.node, "text": c.text, "meta": c.meta}
    return {"id": store.ids[i]}


def index_files(index: ChunkIndex) -> dict[str, bytes]:
    files = {}
    for name in sorted(index.stores):
        store = index.stores[name]
        lines = [json.dumps(_record(store, i), sort_keys=True, ensure_ascii=True, allow_nan=False) for i in range(len(store))]
        files[f"index/{name}.jsonl"] = ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8")
        files[f"index/{name}.vec"] = encode_matrix(store.matrix)
    return files


def save_index(index: ChunkIndex, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for rel, blob in index_files(index).items():
        p = out_dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(blob)
        paths.append(p)
    return paths


def load_index(graph_dir: str | Path) -> ChunkIndex:
    root = Path(graph_dir) / "index"
    if not root.is_dir():
        raise FileNotFoundError(f"{root} not found")
    stores = {}
    by_node = {}
    for name in CHUNK_TYPES + VISUAL_STORES:
        jl, vec = root / f"{name}.jsonl", root / f"{name}.vec"
        if not jl.exists():
            continue
        recs = [json.loads(line) for line in jl.read_text().splitlines() if line.strip()]
        mat = decode_matrix(vec.read_bytes())
        if len(recs) != len(mat):
            raise ValueError(f"{name}: records and vectors disagree")
        chunks = None
        if name in CHUNK_TYPES:
            chunks = [Chunk(r["id"], r["type"], r["node"], r["text"], r["meta"]) for r in recs]
            by_node.update({c.node: c.id for c in chunks})
        stores[name] = Store(name, [r["id"] for r in recs], mat, chunks)
    return ChunkIndex(stores, by_node)
