"""Build configuration: every tunable in one place, loadable from TOML."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class IngestConfig:
    stride: int = 4
    voxel_size: float = 0.05
    max_depth: float | None = None


@dataclass
class HiersegConfig:
    bin: float = 0.10
    peak_frac: float = 0.3
    min_floor_height: float = 2.0
    cell: float = 0.05
    wall_frac: float = 0.4
    min_room_area: float = 2.0
    smooth_sigma: float = 2.0
    # height band (relative to the floor level) whose points feed the wall histogram
    wall_band: tuple[float, float] = (0.3, 2.0)
    wall_absorb: float = 1.0
    marker_prominence: float = 0.3


@dataclass
class KeyframeConfig:
    w: float = 1.0
    eta: float = 0.5
    eps: float = 0.8
    min_pts: int = 3
    coverage_voxel: float = 0.05
    filter_stride: int = 4


@dataclass
class ObjectConfig:
    threshold: float = 0.3
    voxel: float = 0.05
    depth_tol: float = 0.08
    theta_vis: float = 0.25


@dataclass
class SummaryConfig:
    max_chars: int = 12000


@dataclass
class RagConfig:
    k: int = 5
    token_budget: int = 4000
    beam_width: int = 1
    image_cost: int = 16


@dataclass
class ProviderConfig:
    timeout: float = 30.0
    max_in_flight: int = 4
    retries: int = 3
    backoff: float = 0.5


@dataclass
class BuildConfig:
    ingest: IngestConfig = field(default_factory=IngestConfig)
    hierseg: HiersegConfig = field(default_factory=HiersegConfig)
    keyframes: KeyframeConfig = field(default_factory=KeyframeConfig)
    objects: ObjectConfig = field(default_factory=ObjectConfig)
    summaries: SummaryConfig = field(default_factory=SummaryConfig)
    rag: RagConfig = field(default_factory=RagConfig)
    providers: ProviderConfig = field(default_factory=ProviderConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def update(self, values: dict[str, Any]) -> "BuildConfig":
        for section, entries in values.items():
            if not hasattr(self, section):
                raise KeyError(f"unknown config section {section!r}")
            target = getattr(self, section)
            if not isinstance(entries, dict):
                raise TypeError(f"config section {section!r} must be a table")
            for key, value in entries.items():
                _set_field(target, section, key, value)
        return self

    def override(self, dotted: str, value: str) -> "BuildConfig":
        """Apply a ``section.key=value`` override given as strings (CLI ``--set``)."""
        section, _, key = dotted.partition(".")
        if not key or not hasattr(self, section):
            raise KeyError(f"bad override {dotted!r}")
        _set_field(getattr(self, section), section, key, _parse_scalar(value))
        return self


def _set_field(target: Any, section: str, key: str, value: Any) -> None:
    names = {f.name: f for f in dataclasses.fields(target)}
    if key not in names:
        raise KeyError(f"unknown config key {section}.{key}")
    current = getattr(target, key)
    if isinstance(current, tuple):
        value = tuple(value)
    elif isinstance(current, bool):
        value = bool(value)
    elif isinstance(current, int) and not isinstance(value, bool):
        value = int(value)
    elif isinstance(current, float):
        value = float(value)
    setattr(target, key, value)


def _parse_scalar(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | Path | None = None) -> BuildConfig:
    cfg = BuildConfig()
    if path is not None:
        with open(path, "rb") as fh:
            cfg.update(tomllib.load(fh))
    return cfg


def config_from_dict(values: dict[str, Any]) -> BuildConfig:
    return BuildConfig().update(values)
