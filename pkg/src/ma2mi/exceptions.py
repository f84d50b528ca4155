"""
Exceptions

Error types raised across the package. Everything derives from MA2MIError so the
CLI can separate usage errors (exit 1) from runtime failures (exit 2).
"""

from typing import Optional


class MA2MIError(Exception):
    """Base class for all package errors."""


class ConfigError(MA2MIError):
    """Invalid configuration: unknown key, bad value or inconsistent settings."""


class ManifestParseError(MA2MIError):
    """A manifest line is not a well-formed record."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class ClipError(MA2MIError):
    """An error tied to a single clip."""

    def __init__(self, clip_id: Optional[str], message: str):
        self.clip_id = clip_id
        super().__init__(f"clip {clip_id!r}: {message}")


class ManifestValidationError(ClipError):
    """A record violates a ClipRecord invariant."""


class FrameNotFoundError(ClipError):
    """The frames referenced by a record are missing on disk."""


class UnsampleableClipError(ClipError):
    """A clip is too short for the requested sampling interval."""


class MissingAnnotationError(ClipError):
    """Key-frame indices or a label are required but absent."""


class SplitError(MA2MIError):
    """A split plan cannot be built or does not fit the records."""


class CodecNotFittedError(MA2MIError):
    """A convolutional codec was used before being pre-fit."""


class HeadNotAttachedError(MA2MIError):
    """Classification was requested on a model without a head."""


class CheckpointError(MA2MIError):
    """A checkpoint is unreadable or lacks a required parameter group."""


class NonFiniteLossError(MA2MIError):
    """A training step produced a NaN or infinite loss."""


class ReportMismatchError(MA2MIError):
    """Two evaluation reports cannot be compared."""
