"""JSON-over-HTTP provider configured from ``providers.toml``.

Each capability posts to ``{base_url}/{capability}`` with a JSON body holding
the model name, the filled prompt template (when one applies) and any base64
PNG images. Expected responses:

    tag        {"object_tags": [...], "functional_tags": [...]}
    detect     {"detections": [{"label", "box", "mask_rle", "score"}]}
    embed      {"vector": [...]}
    describe / summarize / answer   {"text": "..."}
    parse      {"target": "...", "anchors": [...]}
    decompose  {"floor": ..., "room": ..., "object": ...}
"""

from __future__ import annotations

import base64
import io
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import httpx
import numpy as np
from PIL import Image

from ..errors import ParseFailure, ProviderError, ProviderTimeout
from .base import (
    Detection,
    Embedding,
    Provider,
    TagResult,
    check_decomposed,
    check_level,
    check_parsed,
    rle_decode,
)
from .prompts import render_prompt

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CAPABILITIES = ("tag", "detect", "embed", "describe", "summarize", "parse", "decompose", "answer")


def _png_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _crop(image: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return image
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return image
    out = np.array(image[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1], copy=True)
    out[~mask[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]] = 0
    return out


def load_provider_config(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as fh:
        cfg = tomllib.load(fh)
    if "base_url" not in cfg:
        raise ProviderError(f"{path}: missing base_url")
    return cfg


class HttpProvider(Provider):
    name = "http"
    version = "1"

    def __init__(
        self,
        base_url: str,
        models: dict[str, str] | None = None,
        api_key: str | None = None,
        timeout: float = 30.0,
        transport: httpx.BaseTransport | None = None,
    ):
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.models = dict(models or {})
        self.client = httpx.Client(base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport)
        self.version = "1:" + json.dumps(self.models, sort_keys=True)

    @classmethod
    def from_config(cls, cfg: dict[str, Any], timeout: float = 30.0, transport=None) -> "HttpProvider":
        key_var = cfg.get("api_key_env")
        api_key = os.environ.get(key_var) if key_var else None
        return cls(cfg["base_url"], cfg.get("models", {}), api_key, timeout, transport)

    def _post(self, capability: str, payload: dict[str, Any]) -> dict[str, Any]:
        body = {"model": self.models.get(capability, "")} | payload
        try:
            resp = self.client.post(f"/{capability}", json=body)
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(f"{capability}: {exc}") from exc
        except httpx.TransportError as exc:
            raise ProviderError(f"{capability}: {exc}", retryable=True) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise ProviderError(f"{capability}: HTTP {resp.status_code}", resp.status_code, retryable=True)
        if resp.status_code >= 400:
            raise ProviderError(f"{capability}: HTTP {resp.status_code}", resp.status_code, retryable=False)
        try:
            data = resp.json()
        except ValueError as exc:
            raise ProviderError(f"{capability}: response is not JSON") from exc
        if not isinstance(data, dict):
            raise ProviderError(f"{capability}: response is not an object")
        return data

    def _text(self, capability: str, payload: dict[str, Any]) -> str:
        text = self._post(capability, payload).get("text")
        if not isinstance(text, str):
            raise ProviderError(f"{capability}: missing text")
        return text

    def tag_frame(self, image) -> TagResult:
        data = self._post("tag", {"image": _png_b64(image)})
        return TagResult(data.get("object_tags", []), data.get("functional_tags", []))

    def detect(self, image, vocabulary: Sequence[str]) -> list[Detection]:
        vocab = [v for v in vocabulary if v.strip()]
        if not vocab:
            raise ProviderError("detect needs a non-empty vocabulary")
        data = self._post("detect", {"image": _png_b64(image), "vocabulary": vocab})
        shape = np.asarray(image).shape[:2]
        out = []
        for d in data.get("detections", []):
            det = Detection(d["label"], tuple(d["box"]), rle_decode(d["mask_rle"], shape), float(d.get("score", 1.0)))
            if det.label in {v.lower() for v in vocab}:
                out.append(det)
        return out

    def embed_text(self, text: str) -> Embedding:
        if not text.strip():
            raise ProviderError("cannot embed empty text")
        return Embedding(self._post("embed", {"text": text})["vector"], "text")

    def embed_image(self, image, mask=None) -> Embedding:
        crop = _crop(np.asarray(image), None if mask is None else np.asarray(mask, dtype=bool))
        return Embedding(self._post("embed", {"image": _png_b64(crop)})["vector"], "image")

    def describe_frame(self, image, labels: Sequence[str]) -> str:
        prompt = render_prompt("describe_frame", objects=", ".join(labels) or "(none)")
        return self._text("describe", {"image": _png_b64(image), "prompt": prompt})

    def summarize(self, texts: Sequence[str], level: str) -> str:
        check_level(level)
        prompt = render_prompt(f"summarize_{level}", texts="\n".join(f"- {t}" for t in texts))
        return self._text("summarize", {"prompt": prompt})

    def parse_query(self, query: str) -> dict[str, Any]:
        try:
            data = self._post("parse", {"prompt": render_prompt("parse_query", query=query)})
        except ProviderError as exc:
            raise ParseFailure(str(exc)) from exc
        return check_parsed(data)

    def decompose_hierarchical(self, query: str) -> dict[str, Any]:
        try:
            data = self._post("decompose", {"prompt": render_prompt("decompose_query", query=query)})
        except ProviderError as exc:
            raise ParseFailure(str(exc)) from exc
        return check_decomposed(data)

    def generate_answer(self, query: str, context: Sequence[dict]) -> str:
        lines = [f"[{c['id']}] ({c.get('type')}) {c.get('text', '')}" for c in context]
        prompt = render_prompt("answer", query=query, context="\n".join(lines))
        return self._text("answer", {"prompt": prompt})
