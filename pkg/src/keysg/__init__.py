"""Hierarchical 3D scene graphs from posed RGB-D with keyframe context and retrieval."""

__version__ = "0.1.0"
