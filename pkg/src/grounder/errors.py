"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: config problems exit 2, adapter and
transport problems exit 3, data problems exit 4.
"""

from __future__ import annotations


class GrounderError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(GrounderError):
    """Invalid or missing configuration (files, flags, mock scripts)."""


class DataError(GrounderError):
    """Problems with annotation or result data."""


class ParseError(DataError):
    """A document does not follow its declared schema."""


class IntegrityError(DataError):
    """Cross-references between records do not resolve."""


class TransportError(GrounderError):
    """The detector adapter could not be reached or the stream broke.

    ``retriable`` tells callers whether retrying the same call can help
    (stream hiccup) or not (the adapter process never started).
    """

    def __init__(self, message: str, *, retriable: bool = True, attempts: int = 1):
        super().__init__(message)
        self.retriable = retriable
        self.attempts = attempts


class ProtocolError(GrounderError):
    """The adapter spoke, but violated the wire protocol."""


class AdapterError(GrounderError):
    """The adapter reported an operational failure (e.g. training blew up)."""

    def __init__(self, message: str, *, kind: str = "internal"):
        super().__init__(message)
        self.kind = kind


class LineageError(GrounderError):
    """A model handle is not related to the handle an operation requires."""


class PartialBatchError(GrounderError):
    """Pseudo-label generation died mid-flight; carries what completed."""

    def __init__(self, message: str, *, completed, cause: Exception | None = None):
        super().__init__(message)
        self.completed = list(completed)
        self.cause = cause
