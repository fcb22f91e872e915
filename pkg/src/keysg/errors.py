"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class KeySGError(Exception):
    """Base class. ``stage`` names the pipeline stage that raised it."""

    stage = "keysg"


# ingest
class MissingFile(KeySGError):
    stage = "ingest"


class BadPose(KeySGError):
    stage = "ingest"


class BadIntrinsics(KeySGError):
    stage = "ingest"


class EmptyScene(KeySGError):
    stage = "ingest"


# hierseg
class NoFreeSpace(KeySGError):
    stage = "hierseg"


# keyframes
class EmptyRoom(KeySGError):
    stage = "keyframes"


# providers
class ProviderError(KeySGError):
    stage = "providers"

    def __init__(self, message: str, status: int | None = None, retryable: bool = False):
        super().__init__(message)
        self.status = status
        self.retryable = retryable


class ProviderTimeout(ProviderError):
    def __init__(self, message: str = "provider call timed out"):
        super().__init__(message, status=None, retryable=True)


class ParseFailure(KeySGError):
    stage = "providers"


# objects
class EmptySegment(KeySGError):
    stage = "objects"


class EmptyMask(KeySGError):
    stage = "objects"


# graph
class InconsistentIds(KeySGError):
    stage = "graph"


class SchemaVersionMismatch(KeySGError):
    stage = "graph"


class CorruptSidecar(KeySGError):
    stage = "graph"


class UnknownId(KeySGError, KeyError):
    stage = "graph"


# ragindex
class MissingSummary(KeySGError):
    stage = "ragindex"


class EmptyStore(KeySGError):
    stage = "ragindex"


class UngroundedAnswer(KeySGError):
    stage = "ragindex"


# evalharness / cli
class EmptyGT(KeySGError):
    stage = "eval"


class SchemaError(KeySGError):
    stage = "eval"
