"""Deterministic offline provider driven by a fixture table.

Frames carry their fixture id stamped into the image (see
:func:`embed_fixture_id`). The table maps ids to tags, captions and
detections with run-length masks. Text capabilities follow fixed rules so
every output is a pure function of the inputs.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ..errors import ParseFailure, ProviderError
from .base import (
    Detection,
    Embedding,
    Provider,
    TagResult,
    check_decomposed,
    check_level,
    check_parsed,
    hash_embedding,
    read_fixture_id,
    rle_decode,
    tokenize,
)

_LEADS = (
    "where is",
    "where are",
    "where's",
    "can you find",
    "please find",
    "find",
    "show me",
    "locate",
    "what is",
    "which is",
    "go to",
)
_RELATIONS = (
    "in front of",
    "next to",
    "close to",
    "on top of",
    "near",
    "beside",
    "behind",
    "under",
    "above",
    "below",
    "by",
    "in",
    "on",
    "at",
)
_DETERMINERS = {"the", "a", "an", "my", "that", "this", "some", "our"}
_REL_RE = re.compile(r"\s+(?:" + "|".join(re.escape(r) for r in _RELATIONS) + r")\s+")
_FLOOR_RE = re.compile(r"\b(?:on|at)\s+(?:the\s+)?((?:[\w-]+\s+){0,2}?(?:floor|storey|story|level))\b")
_ROOM_RE = re.compile(r"\bin\s+(?:the\s+)?([\w\s-]+?)\s*$")
# furniture that marks a room type; the mock summarizer names the best match
ROOM_HINTS = {
    "bathroom": ("toilet", "shower", "bathtub", "sink"),
    "bedroom": ("bed", "wardrobe", "nightstand", "dresser"),
    "kitchen": ("oven", "fridge", "stove", "microwave", "dishwasher", "sink"),
    "living room": ("sofa", "couch", "tv", "armchair"),
    "office": ("desk", "monitor", "computer"),
}
_ID_RE = re.compile(r"\[([A-Za-z0-9_.:-]+)\]")


def _normalize(query: str) -> str:
    q = re.sub(r"[?!.,;]+", " ", query.lower())
    q = " ".join(q.split())
    for lead in _LEADS:
        if q.startswith(lead + " "):
            q = q[len(lead) + 1 :]
            break
    return q


def _strip_det(phrase: str) -> str:
    words = phrase.split()
    while words and words[0] in _DETERMINERS:
        words = words[1:]
    return " ".join(words)


def cited_ids(text: str) -> list[str]:
    """Node ids cited as ``[id]`` in answer text, in order of appearance."""
    out = []
    for m in _ID_RE.findall(text):
        if m not in out:
            out.append(m)
    return out


class MockProvider(Provider):
    name = "mock"
    version = "1"

    def __init__(self, fixtures: Mapping[str, Any] | str | Path | None = None):
        if fixtures is None:
            table: Mapping[str, Any] = {"frames": {}}
        elif isinstance(fixtures, (str, Path)):
            table = json.loads(Path(fixtures).read_text())
        else:
            table = fixtures
        self.frames: Mapping[str, Any] = table.get("frames", {})

    def _entry(self, image) -> dict | None:
        fid = read_fixture_id(image)
        return None if fid is None else self.frames.get(fid)

    # ------------------------------------------------------------ perception

    def tag_frame(self, image) -> TagResult:
        e = self._entry(image)
        if e is None:
            return TagResult()
        return TagResult(e.get("object_tags", []), e.get("functional_tags", []))

    def _detections(self, image, entry) -> list[Detection]:
        shape = np.asarray(image).shape[:2]
        out = []
        for d in entry.get("detections", []):
            out.append(
                Detection(
                    label=d["label"],
                    box=tuple(d["box"]),
                    mask=rle_decode(d["mask_rle"], shape),
                    score=float(d.get("score", 1.0)),
                    caption=d.get("caption", d["label"]),
                )
            )
        return out

    def detect(self, image, vocabulary: Sequence[str]) -> list[Detection]:
        vocab = {v.strip().lower() for v in vocabulary if v.strip()}
        if not vocab:
            raise ProviderError("detect needs a non-empty vocabulary")
        e = self._entry(image)
        if e is None:
            return []
        return [d for d in self._detections(image, e) if d.label in vocab]

    def embed_text(self, text: str) -> Embedding:
        return Embedding(hash_embedding(text), "text")

    def embed_image(self, image, mask=None) -> Embedding:
        e = self._entry(image)
        if e is None:
            return Embedding(hash_embedding("unknown image"), "image")
        caption = e.get("caption") or "image"
        if mask is not None:
            m = np.asarray(mask, dtype=bool)
            best, best_iou = None, 0.0
            for d in self._detections(image, e):
                inter = np.count_nonzero(d.mask & m)
                if inter == 0:
                    continue
                iou = inter / np.count_nonzero(d.mask | m)
                if iou > best_iou:
                    best, best_iou = d, iou
            if best is not None:
                caption = best.caption or best.label
        return Embedding(hash_embedding(caption), "image")

    # ------------------------------------------------------------ language

    def describe_frame(self, image, labels: Sequence[str]) -> str:
        return ("Frame shows: " + ", ".join(labels)).rstrip()

    def summarize(self, texts: Sequence[str], level: str) -> str:
        if not texts:
            raise ProviderError("summarize needs at least one text")
        if check_level(level) == "floor":
            return "FLOOR SUMMARY: " + " | ".join(texts)
        words = set(tokenize(" ".join(texts)))
        hits = sorted((-sum(w in words for w in ws), name) for name, ws in ROOM_HINTS.items())
        kind = f" | Likely a {hits[0][1]}." if hits[0][0] < 0 else ""
        return "ROOM SUMMARY: " + " | ".join(texts) + kind

    def parse_query(self, query: str) -> dict[str, Any]:
        parts = [_strip_det(p) for p in _REL_RE.split(" " + _normalize(query) + " ")]
        parts = [p for p in parts if p]
        if not parts:
            raise ParseFailure(f"cannot parse {query!r}")
        return check_parsed({"target": parts[0], "anchors": parts[1:]})

    def decompose_hierarchical(self, query: str) -> dict[str, Any]:
        q = _normalize(query)
        floor = None
        m = _FLOOR_RE.search(q)
        if m:
            floor = m.group(1).strip()
            q = (q[: m.start()] + " " + q[m.end() :]).strip()
        room = None
        m = _ROOM_RE.search(q)
        if m:
            room = _strip_det(m.group(1).strip())
            q = q[: m.start()].strip()
        obj = _strip_det(_REL_RE.split(" " + q + " ")[0])  # relations belong to the answer stage
        if not obj:
            raise ParseFailure(f"no object in {query!r}")
        return check_decomposed({"floor": floor, "room": room, "object": obj})

    def generate_answer(self, query: str, context: Sequence[dict]) -> str:
        """Cite the best target object; anchors break ties by proximity.

        Context items are dicts with ``id``, ``type``, ``role``, ``score`` and,
        for objects, ``label`` and ``centroid``.
        """
        targets = [c for c in context if c.get("type") == "object" and c.get("role") == "target"]
        if not targets:
            return "No matching object was found."
        parsed = self.parse_query(query)
        exact = [c for c in targets if c.get("label") == parsed["target"]]
        pool = exact or targets
        anchors = [
            c
            for c in context
            if c.get("type") == "object" and c.get("role") == "anchor" and c.get("label") in parsed["anchors"]
        ]
        if anchors:
            anchor_pts = np.array([a["centroid"] for a in anchors], dtype=np.float64)

            def dist(c):
                return float(np.min(np.linalg.norm(anchor_pts - np.asarray(c["centroid"]), axis=1)))

            best = min(pool, key=lambda c: (dist(c), -c["score"], c["id"]))
        else:
            best = min(pool, key=lambda c: (-c["score"], c["id"]))
        return f"The {best.get('label', 'object')} is object [{best['id']}]."
