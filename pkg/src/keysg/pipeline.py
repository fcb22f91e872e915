"""End-to-end build: posed RGB-D sequence in, scene graph and retrieval index out."""

from __future__ import annotations

import datetime as _dt
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .config import BuildConfig
from .errors import EmptyRoom, EmptySegment, KeySGError, NoFreeSpace, ProviderError
from .graph import KeyframeRecord, SceneGraph, assemble, locate_point, save_graph
from .hierseg import detect_floors, segment_floor
from .ingest import fuse_scene, load_sequence
from .keyframes import assign_frames, coverage, filter_by_projection, select_keyframes
from .objects import attach_embedding, lift_mask, merge_objects, segment_functional_elements
from .providers.base import Provider, TagResult
from .ragindex import build_index, chunk_graph, save_index
from .summaries import describe_keyframes, summarize_building

log = logging.getLogger(__name__)


@dataclass
class BuildLog:
    stages: dict[str, float] = field(default_factory=dict)
    skipped: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)
    provider: dict[str, Any] = field(default_factory=dict)

    def stage(self, name: str):
        log_ = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()
                log.info("stage %s", name)

            def __exit__(self, *exc):
                log_.stages[name] = round(time.perf_counter() - self.t0, 4)

        return _Timer()

    def skip(self, stage: str, what: str, reason: str) -> None:
        self.skipped.append({"stage": stage, "item": what, "reason": reason})
        log.warning("[%s] skipped %s: %s", stage, what, reason)

    @property
    def partial(self) -> bool:
        """True when some provider call failed and its item was skipped."""
        return any(s.get("provider") for s in self.skipped)

    def to_dict(self) -> dict:
        return {
            "stages": self.stages,
            "counts": self.counts,
            "provider": self.provider,
            "skipped": self.skipped,
            "notes": self.notes,
            "partial": self.partial,
        }


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def build_timestamp() -> str | None:
    """ISO time from SOURCE_DATE_EPOCH, or None so repeated builds stay byte-identical."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if not epoch:
        return None
    return _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc).isoformat()


def build(
    input_dir: str | Path,
    out_dir: str | Path,
    cfg: BuildConfig,
    provider: Provider,
    jobs: int = 1,
    stats: Callable[[], dict] | None = None,
) -> tuple[SceneGraph, BuildLog]:
    """Run every stage and write graph.json, clouds/, index/ and build.log to ``out_dir``."""
    out_dir = Path(out_dir)
    blog = BuildLog()

    def provider_skip(stage, what, exc):
        blog.skip(stage, what, str(exc))
        blog.skipped[-1]["provider"] = True

    with blog.stage("ingest"):
        frames, intr = load_sequence(input_dir)
        by_index = {f.index: f for f in frames}
        cloud = fuse_scene(frames, intr, cfg.ingest.voxel_size, cfg.ingest.stride, cfg.ingest.max_depth, jobs)

    with blog.stage("hierseg"):
        floors = detect_floors(cloud, cfg.hierseg.bin, cfg.hierseg.peak_frac, cfg.hierseg.min_floor_height)
        rooms = []
        for fl in floors:
            try:
                _, rs = segment_floor(fl, cfg.hierseg)
            except NoFreeSpace as exc:
                blog.skip("hierseg", f"floor {fl.index}", str(exc))
                continue
            rooms.extend(rs)
        if not rooms:
            raise NoFreeSpace("no rooms found on any floor")

    kc = cfg.keyframes
    with blog.stage("keyframes"):
        sets = assign_frames(frames, rooms, floors)
        poses = {f.index: f.pose for f in frames}

        def select(k):
            s = sets[k]
            cands = [by_index[i] for i in s.candidates]
            s.eta = kc.eta
            s.dense = filter_by_projection(cands, rooms[k].polygon, intr, kc.eta, kc.filter_stride)
            try:
                s.keyframes, _ = select_keyframes(poses, s.dense, kc.w, kc.eps, kc.min_pts)
            except EmptyRoom:
                s.flags.append("no_keyframes")
                return None
            return coverage([by_index[i] for i in s.keyframes], [by_index[i] for i in s.dense], intr, kc.coverage_voxel)

        covs = _pmap(select, list(range(len(rooms))), jobs)
        for k, s in enumerate(sets):
            if "no_keyframes" in s.flags:
                blog.skip("keyframes", f"room {k}", "no frames survived filtering")

    with blog.stage("tagging"):
        records: dict[int, list[KeyframeRecord]] = {}

        def tag(idx):
            f = by_index[idx]
            try:
                tags = provider.tag_frame(f.color)
            except ProviderError as exc:
                return idx, TagResult(), exc
            return idx, tags, None

        for k, s in enumerate(sets):
            recs = []
            for idx, tags, exc in _pmap(tag, s.keyframes, jobs):
                if exc is not None:
                    provider_skip("providers", f"tag frame {idx}", exc)
                f = by_index[idx]
                recs.append(
                    KeyframeRecord(idx, f.pose.copy(), f.path, f"depth/{idx:06d}.png", tags=tags)
                )
            records[k] = recs
        vocab = {k: sorted({t for r in recs for t in r.tags.object_tags}) for k, recs in records.items()}
        ftags = {k: sorted({t for r in recs for t in r.tags.functional_tags}) for k, recs in records.items()}

    oc = cfg.objects
    with blog.stage("objects"):
        work = [(k, i) for k, s in enumerate(sets) if vocab[k] for i in s.dense]

        def detect(item):
            k, idx = item
            f = by_index[idx]
            try:
                dets = provider.detect(f.color, vocab[k])
            except ProviderError as exc:
                return item, [], exc
            segs = []
            for d in dets:
                try:
                    segs.append((lift_mask(d, f, intr), d, idx))
                except EmptySegment:
                    continue
            return item, segs, None

        segments = []
        for item, segs, exc in _pmap(detect, work, jobs):
            if exc is not None:
                provider_skip("providers", f"detect frame {item[1]}", exc)
            segments.extend(segs)
        objects = merge_objects(segments, oc.threshold, oc.voxel)
        for obj in objects:
            obj.room, _ = locate_point(obj.cloud.centroid(), rooms, floors)

        def finish(obj):
            try:
                view = attach_embedding(obj, lambda i: by_index[i].color, provider)
                elems = segment_functional_elements(obj, ftags.get(obj.room, []), by_index[view.frame], intr, provider)
            except ProviderError as exc:
                return obj, [], exc
            return obj, elems, None

        for obj, elems, exc in _pmap(finish, objects, jobs):
            if exc is not None:
                provider_skip("providers", f"object {obj.id}", exc)
            obj.functional_elements = elems

    with blog.stage("descriptions"):
        def embed_kf(rec):
            try:
                return provider.embed_image(by_index[rec.index].color).vector, None
            except ProviderError as exc:
                return None, exc

        all_recs = [r for k in sorted(records) for r in records[k]]
        for rec, (vec, exc) in zip(all_recs, _pmap(embed_kf, all_recs, jobs)):
            rec.embedding = vec
            if exc is not None:
                provider_skip("providers", f"embed frame {rec.index}", exc)

        def describe(k):
            room_objs = [o for o in objects if o.room == k]
            return describe_keyframes(
                records[k], by_index.__getitem__, room_objs, intr, provider, oc.theta_vis, oc.depth_tol
            )

        for k, skipped in zip(sorted(records), _pmap(describe, sorted(records), jobs)):
            for idx in skipped:
                provider_skip("providers", f"describe frame {idx}", "provider error")

    with blog.stage("summaries"):
        descs = {k: [r.description for r in records[k]] for k in range(len(rooms))}
        by_floor: dict[int, list[int]] = {}
        for k, r in enumerate(rooms):
            by_floor.setdefault(r.floor_index, []).append(k)
        room_sums, floor_sums = summarize_building(descs, by_floor, provider, cfg.summaries.max_chars)

    with blog.stage("graph"):
        metadata = {
            "keysg_version": __version__,
            "config": cfg.to_dict(),
            "config_digest": cfg.digest(),
            "provider": provider.describe(),
            "created": build_timestamp(),
            "intrinsics": [intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height, intr.depth_scale],
        }
        extras = {
            k: {"dense_frames": s.dense, "coverage": covs[k], "flags": s.flags} for k, s in enumerate(sets)
        }
        graph = assemble(floors, rooms, records, objects, room_sums, floor_sums, metadata, extras)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_graph(graph, out_dir, cfg.ingest.voxel_size)

    with blog.stage("index"):
        index = build_index(chunk_graph(graph), provider, graph, jobs)
        save_index(index, out_dir)

    blog.counts = graph.counts() | {"frames": len(frames), "segments": len(segments)}
    if stats is not None:
        blog.provider = stats()
    (out_dir / "build.log").write_text(json.dumps(blog.to_dict(), indent=1, sort_keys=True) + "\n")
    return graph, blog


def stage_of(exc: BaseException) -> str:
    return getattr(exc, "stage", "keysg") if isinstance(exc, KeySGError) else "keysg"

