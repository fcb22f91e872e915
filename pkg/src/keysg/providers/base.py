"""Result types, the provider interface and the hashing text embedder."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ..errors import ParseFailure, ProviderError

EMBED_DIM = 256
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

FNV_OFFSET = 0x811C9DC5
FNV_PRIME = 0x01000193


def tokenize(text: str) -> list[str]:
    """Lowercased tokens split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def fnv1a(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFF
    return h


def token_slot(token: str, dim: int = EMBED_DIM) -> int:
    return fnv1a(token.encode("utf-8")) % dim


def hash_embedding(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Normalised bag-of-tokens count vector; cosine equals bag-of-words cosine absent collisions."""
    tokens = tokenize(text)
    if not tokens:
        raise ProviderError(f"nothing to embed in {text!r}")
    vec = np.zeros(dim, dtype=np.float64)
    for t in tokens:
        vec[token_slot(t, dim)] += 1.0
    return vec / np.linalg.norm(vec)


_MAGIC = b"KSG"


def embed_fixture_id(image: np.ndarray, fixture_id: str) -> np.ndarray:
    """Stamp ``fixture_id`` into the red channel of row 0 (lossless under PNG)."""
    data = _MAGIC + bytes([len(fixture_id)]) + fixture_id.encode("ascii")
    if len(data) > image.shape[1]:
        raise ValueError("image too narrow for fixture id")
    out = np.array(image, dtype=np.uint8, copy=True)
    out[0, : len(data), 0] = np.frombuffer(data, dtype=np.uint8)
    return out


def read_fixture_id(image) -> str | None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[1] < 4:
        return None
    row = img[0, :, 0].astype(np.uint8).tobytes()
    if row[:3] != _MAGIC:
        return None
    n = row[3]
    try:
        return row[4 : 4 + n].decode("ascii")
    except UnicodeDecodeError:
        return None


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, starting with a (possibly empty) run of zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    runs = np.diff(np.r_[0, change, flat.size]).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, value = 0, False
    for r in runs:
        if value:
            flat[pos : pos + r] = True
        pos += r
        value = not value
    return flat.reshape(shape)


def _clean_tags(tags: Sequence[str]) -> list[str]:
    out = []
    for t in tags:
        t = str(t).strip().lower()
        if t and t not in out:
            out.append(t)
    return out


@dataclass
class TagResult:
    object_tags: list[str] = field(default_factory=list)
    functional_tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.object_tags = _clean_tags(self.object_tags)
        self.functional_tags = _clean_tags(self.functional_tags)

    def to_dict(self) -> dict:
        return {"object_tags": list(self.object_tags), "functional_tags": list(self.functional_tags)}

    @classmethod
    def from_dict(cls, d: dict) -> "TagResult":
        return cls(d.get("object_tags", []), d.get("functional_tags", []))


@dataclass
class Detection:
    label: str
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 (end-exclusive pixels)
    mask: np.ndarray  # (H, W) bool
    score: float = 1.0
    caption: str = ""

    def __post_init__(self):
        self.label = str(self.label).strip().lower()
        self.box = tuple(int(b) for b in self.box)
        self.mask = np.asarray(self.mask, dtype=bool)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("detection score must lie in [0, 1]")
        x0, y0, x1, y1 = self.box
        ys, xs = np.nonzero(self.mask)
        if len(xs) and (xs.min() < x0 or ys.min() < y0 or xs.max() >= x1 or ys.max() >= y1):
            raise ValueError("detection mask leaves its box")


@dataclass
class Embedding:
    vector: np.ndarray
    modality: str = "text"  # text | image

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).ravel()
        n = np.linalg.norm(v)
        if not np.all(np.isfinite(v)) or n == 0:
            raise ProviderError("embedding must be finite and nonzero")
        self.vector = v / n
        if self.modality not in ("text", "image"):
            raise ValueError(f"unknown modality {self.modality!r}")


class Provider:
    """Perception and language capabilities used by the pipeline.

    Images are (H, W, 3) uint8 arrays. ``embed_image`` takes the full frame
    plus an optional pixel mask; implementations crop as they see fit.
    """

    name = "abstract"
    version = "0"

    def tag_frame(self, image: np.ndarray) -> TagResult:
        raise NotImplementedError

    def detect(self, image: np.ndarray, vocabulary: Sequence[str]) -> list[Detection]:
        raise NotImplementedError

    def embed_text(self, text: str) -> Embedding:
        raise NotImplementedError

    def embed_image(self, image: np.ndarray, mask: np.ndarray | None = None) -> Embedding:
        raise NotImplementedError

    def describe_frame(self, image: np.ndarray, labels: Sequence[str]) -> str:
        raise NotImplementedError

    def summarize(self, texts: Sequence[str], level: str) -> str:
        raise NotImplementedError

    def parse_query(self, query: str) -> dict[str, Any]:
        raise NotImplementedError

    def decompose_hierarchical(self, query: str) -> dict[str, Any]:
        raise NotImplementedError

    def generate_answer(self, query: str, context: Sequence[dict]) -> str:
        raise NotImplementedError

    def describe(self) -> dict[str, str]:
        return {"name": self.name, "version": self.version}


def check_level(level: str) -> str:
    if level not in ("room", "floor"):
        raise ValueError(f"summary level must be 'room' or 'floor', got {level!r}")
    return level


def check_parsed(parsed: Any) -> dict[str, Any]:
    """Validate a parse_query result: {'target': str, 'anchors': [str]}."""
    if not isinstance(parsed, dict):
        raise ParseFailure("parse result is not an object")
    target = parsed.get("target")
    anchors = parsed.get("anchors", [])
    if not isinstance(target, str) or not target.strip():
        raise ParseFailure("parse result has no target")
    if not isinstance(anchors, list) or not all(isinstance(a, str) for a in anchors):
        raise ParseFailure("anchors must be a list of strings")
    return {"target": target.strip(), "anchors": [a.strip() for a in anchors if a.strip()]}


def check_decomposed(parts: Any) -> dict[str, Any]:
    """Validate a decomposition: object required, floor/room optional (None when absent)."""
    if not isinstance(parts, dict):
        raise ParseFailure("decomposition is not an object")
    out = {}
    for key in ("floor", "room", "object"):
        v = parts.get(key)
        if v is not None and not isinstance(v, str):
            raise ParseFailure(f"{key} must be a string")
        out[key] = v.strip() if isinstance(v, str) and v.strip() else None
    if out["object"] is None:
        raise ParseFailure("decomposition has no object")
    return out
