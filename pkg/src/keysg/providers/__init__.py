"""Perception and language providers behind one interface."""

from __future__ import annotations

import os
from pathlib import Path

from .base import (
    EMBED_DIM,
    Detection,
    Embedding,
    Provider,
    TagResult,
    embed_fixture_id,
    hash_embedding,
    read_fixture_id,
    tokenize,
)
from .mock import MockProvider, cited_ids
from .runtime import CachingProvider, GuardedProvider

__all__ = [
    "EMBED_DIM",
    "CachingProvider",
    "Detection",
    "Embedding",
    "GuardedProvider",
    "MockProvider",
    "Provider",
    "TagResult",
    "cited_ids",
    "embed_fixture_id",
    "hash_embedding",
    "make_provider",
    "mock_forced",
    "read_fixture_id",
    "tokenize",
]


def mock_forced() -> bool:
    return os.environ.get("KEYSG_MOCK", "").strip().lower() in ("1", "true", "yes", "on")


def make_provider(
    mock: bool = False,
    fixtures: str | Path | None = None,
    providers_toml: str | Path | None = None,
    cache_dir: str | Path | None = None,
    cfg=None,
) -> tuple[GuardedProvider, CachingProvider | None]:
    """Build the provider stack: cache (optional) over retry guard over the backend.

    ``KEYSG_MOCK=1`` forces the mock; ``KEYSG_CACHE_DIR`` overrides ``cache_dir``.
    Returns the guard (for call statistics) and the outermost cache, if any.
    """
    from ..config import ProviderConfig

    cfg = cfg or ProviderConfig()
    if mock or mock_forced():
        backend: Provider = MockProvider(fixtures if fixtures and Path(fixtures).exists() else None)
    else:
        from .http import HttpProvider, load_provider_config

        path = providers_toml or "providers.toml"
        if not Path(path).exists():
            raise FileNotFoundError(f"provider config {path} not found (use --mock for offline builds)")
        backend = HttpProvider.from_config(load_provider_config(path), timeout=cfg.timeout)
    guard = GuardedProvider(backend, cfg.retries, cfg.backoff, cfg.max_in_flight)
    cache_dir = os.environ.get("KEYSG_CACHE_DIR") or cache_dir
    cache = CachingProvider(guard, cache_dir) if cache_dir else None
    return guard, cache
