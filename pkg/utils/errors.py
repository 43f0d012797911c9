"""
Error types for pagebook.
"""

from typing import Any


class PagebookError(Exception):
    """Base class for every error raised by pagebook."""


class ConfigError(PagebookError):
    """Invalid or incomplete configuration."""


class SequencingError(PagebookError):
    """A turn arrived out of order."""


class PageStateError(PagebookError):
    """An operation was applied to a page in the wrong state."""


class InputError(PagebookError):
    """Caller supplied an invalid argument."""


class DatasetError(PagebookError):
    """A corpus could not be generated or loaded."""


class SchemaError(DatasetError):
    """A corpus record violates the expected schema."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ModelIOError(PagebookError):
    """Base class for model access failures."""


class TransportError(ModelIOError):
    """The endpoint could not be reached."""


class HttpStatusError(ModelIOError):
    """The endpoint answered with a non-success status."""

    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


class ProtocolError(ModelIOError):
    """The endpoint answered with a body we cannot parse."""

    def __init__(self, message: str, payload: Any = None):
        super().__init__(message)
        self.payload = payload


class JudgeParseError(ModelIOError):
    """A judge reply carried no usable score."""
