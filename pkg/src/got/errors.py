"""Exception hierarchy shared across the toolkit.

``ValidationError`` covers malformed inputs (bad annotation records, shape
mismatches, invalid arguments); everything else derives from ``GotError`` so
callers can catch toolkit failures without swallowing programming errors.
"""


class GotError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(GotError):
    """Input violates a documented precondition or invariant."""


class AnnotationParseError(ValidationError):
    """Annotation file is syntactically malformed (carries the line number)."""

    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number


class GenerationError(GotError):
    """Synthetic corpus generation cannot satisfy the requested layout."""


class CheckpointError(GotError):
    """Base class for checkpoint load/save failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class CheckpointCorruptionError(CheckpointError):
    """Checkpoint archive is truncated or its content digest does not match."""


class CheckpointTaskMismatchError(CheckpointError):
    """Checkpoint belongs to a different task than the one requested."""


class TrainingDivergedError(GotError):
    """A training step produced a non-finite loss; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
