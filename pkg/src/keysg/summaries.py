"""Grounded keyframe descriptions and bottom-up room and floor summaries."""

from __future__ import annotations

import logging
from typing import Callable, Mapping, Sequence

from .errors import ProviderError
from .graph import KeyframeRecord, object_id
from .ingest import Intrinsics, PosedFrame
from .objects import ObjectSegment, visible_objects
from .providers.base import Provider

log = logging.getLogger(__name__)

UNOBSERVED = "unobserved room"


def describe_keyframes(
    records: Sequence[KeyframeRecord],
    frame_of: Callable[[int], PosedFrame],
    objects: Sequence[ObjectSegment],
    intr: Intrinsics,
    provider: Provider,
    theta_vis: float = 0.25,
    depth_tol: float = 0.08,
) -> list[int]:
    """Fill ``description`` and ``visible`` on each record; returns indices of skipped frames.

    Only objects passing the visibility test are named in the prompt, most
    visible first, each label once.
    """
    by_id = {o.id: o for o in objects}
    skipped = []
    for rec in records:
        frame = frame_of(rec.index)
        hits = visible_objects(frame, objects, intr, theta_vis, depth_tol)
        labels: list[str] = []
        for oid, _ in hits:
            lab = by_id[oid].label
            if lab not in labels:
                labels.append(lab)
        try:
            rec.description = provider.describe_frame(frame.color, labels)
        except ProviderError as exc:
            log.warning("frame %d not described: %s", rec.index, exc)
            skipped.append(rec.index)
            continue
        rec.visible = [object_id(oid) for oid, _ in hits]
    return skipped


def _chunks(texts: Sequence[str], max_chars: int) -> list[list[str]]:
    out: list[list[str]] = [[]]
    size = 0
    for t in texts:
        if out[-1] and size + len(t) > max_chars:
            out.append([])
            size = 0
        out[-1].append(t)
        size += len(t)
    return out


def summarize_texts(texts: Sequence[str], level: str, provider: Provider, max_chars: int = 12000) -> str:
    """One provider summary, or map-then-reduce when the input exceeds ``max_chars``."""
    texts = [t for t in texts if t]
    if not texts:
        raise ValueError("nothing to summarize")
    if max_chars <= 0:
        raise ValueError("max_chars must be positive")
    while sum(len(t) for t in texts) > max_chars and len(texts) > 1:
        groups = _chunks(texts, max_chars)
        if len(groups) == 1 or len(groups) >= len(texts):
            break  # no reduction possible (single group, or every text alone is over budget)
        texts = [provider.summarize(g, level) for g in groups]
    return provider.summarize(texts, level)


def summarize_room(descriptions: Sequence[str], provider: Provider, max_chars: int = 12000) -> str:
    if not any(descriptions):
        return UNOBSERVED
    return summarize_texts(descriptions, "room", provider, max_chars)


def summarize_floor(room_summaries: Sequence[str], provider: Provider, max_chars: int = 12000) -> str:
    if not room_summaries:
        raise ValueError("a floor needs at least one room summary")
    return summarize_texts(room_summaries, "floor", provider, max_chars)


def summarize_building(
    room_descriptions: Mapping[int, Sequence[str]],
    rooms_by_floor: Mapping[int, Sequence[int]],
    provider: Provider,
    max_chars: int = 12000,
) -> tuple[dict[int, str], dict[int, str]]:
    """Room summaries keyed like ``room_descriptions``, then one summary per floor."""
    rooms = {k: summarize_room(d, provider, max_chars) for k, d in sorted(room_descriptions.items())}
    floors = {}
    for f, members in sorted(rooms_by_floor.items()):
        texts = [rooms[k] for k in members if k in rooms]
        floors[f] = summarize_floor(texts, provider, max_chars) if texts else UNOBSERVED.replace("room", "floor")
    return rooms, floors
