"""Provider wrappers: bounded concurrency with retries, and an on-disk response cache."""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from collections import Counter
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ..errors import ProviderError
from .base import Detection, Embedding, Provider, TagResult, rle_decode, rle_encode

METHODS = (
    "tag_frame",
    "detect",
    "embed_text",
    "embed_image",
    "describe_frame",
    "summarize",
    "parse_query",
    "decompose_hierarchical",
    "generate_answer",
)


class GuardedProvider(Provider):
    """At most ``max_in_flight`` concurrent calls; retryable errors back off exponentially."""

    def __init__(
        self,
        inner: Provider,
        retries: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 4,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.inner = inner
        self.name, self.version = inner.name, inner.version
        self.retries = retries
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self._sleep = sleep
        self._lock = threading.Lock()
        self.calls: Counter = Counter()
        self.retried: Counter = Counter()
        self.failures: Counter = Counter()

    def _call(self, method: str, *args):
        fn = getattr(self.inner, method)
        attempt = 0
        while True:
            with self._lock:
                self.calls[method] += 1
            try:
                with self._slots:
                    return fn(*args)
            except ProviderError as exc:
                if not exc.retryable or attempt >= self.retries:
                    with self._lock:
                        self.failures[method] += 1
                    raise
                with self._lock:
                    self.retried[method] += 1
                self._sleep(self.backoff * (2**attempt))
                attempt += 1

    def stats(self) -> dict[str, Any]:
        with self._lock:
            return {
                "calls": dict(sorted(self.calls.items())),
                "retries": dict(sorted(self.retried.items())),
                "failures": dict(sorted(self.failures.items())),
            }


# ---------------------------------------------------------------- cache codecs


def _digest_arg(arg: Any, h) -> None:
    if isinstance(arg, np.ndarray):
        a = np.ascontiguousarray(arg)
        h.update(f"nd:{a.dtype.str}:{a.shape}".encode())
        h.update(a.tobytes())
    elif arg is None:
        h.update(b"none")
    else:
        h.update(json.dumps(arg, sort_keys=True, default=_jsonable).encode())
    h.update(b"\x00")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot hash {type(x)!r}")


def _encode(method: str, value: Any, args) -> Any:
    if method == "tag_frame":
        return value.to_dict()
    if method == "detect":
        return [
            {"label": d.label, "box": list(d.box), "mask_rle": rle_encode(d.mask), "score": d.score, "caption": d.caption}
            for d in value
        ]
    if method in ("embed_text", "embed_image"):
        return {"vector": value.vector.tolist(), "modality": value.modality}
    return value


def _decode(method: str, data: Any, args) -> Any:
    if method == "tag_frame":
        return TagResult.from_dict(data)
    if method == "detect":
        shape = np.asarray(args[0]).shape[:2]
        return [Detection(d["label"], tuple(d["box"]), rle_decode(d["mask_rle"], shape), d["score"], d["caption"]) for d in data]
    if method in ("embed_text", "embed_image"):
        return Embedding(np.array(data["vector"]), data["modality"])
    return data


class CachingProvider(Provider):
    """Responses stored as JSON under ``cache_dir`` keyed by a content hash of the call."""

    def __init__(self, inner: Provider, cache_dir: str | Path):
        self.inner = inner
        self.name, self.version = inner.name, inner.version
        self.root = Path(cache_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        self.hits = 0
        self.misses = 0

    def key(self, method: str, args) -> str:
        h = hashlib.sha256(f"{self.name}:{self.version}:{method}".encode())
        for a in args:
            _digest_arg(a, h)
        return h.hexdigest()

    def _lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def _call(self, method: str, *args):
        key = self.key(method, args)
        path = self.root / key[:2] / f"{key}.json"
        with self._lock_for(key):
            if path.exists():
                try:
                    value = _decode(method, json.loads(path.read_text()), args)
                    with self._guard:
                        self.hits += 1
                    return value
                except (ValueError, KeyError, TypeError):
                    pass  # unreadable entry: recompute and overwrite
            value = getattr(self.inner, method)(*args)
            path.parent.mkdir(exist_ok=True)
            tmp = path.with_suffix(f".{os.getpid()}.{threading.get_ident()}.tmp")
            tmp.write_text(json.dumps(_encode(method, value, args), sort_keys=True))
            os.replace(tmp, path)
            with self._guard:
                self.misses += 1
            return value

    def stats(self) -> dict[str, Any]:
        return {"hits": self.hits, "misses": self.misses}


def _forward(method: str):
    def call(self, *args):
        return self._call(method, *args)

    call.__name__ = method
    return call


for _m in METHODS:
    setattr(GuardedProvider, _m, _forward(_m))
    setattr(CachingProvider, _m, _forward(_m))
