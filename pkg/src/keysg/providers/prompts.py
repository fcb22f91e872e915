"""Versioned prompt templates shipped as package data."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

PROMPT_NAMES = ("describe_frame", "summarize_room", "summarize_floor", "parse_query", "decompose_query", "answer")


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    if name not in PROMPT_NAMES:
        raise KeyError(f"unknown prompt {name!r}")
    return resources.files("keysg").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")


def render_prompt(name: str, **fields: str) -> str:
    return load_prompt(name).format(**fields)
