"""Exception types shared across the toolkit."""

from __future__ import annotations


class PointrankError(Exception):
    """Base class for all toolkit errors."""


class DataError(PointrankError):
    """Malformed or inconsistent input data.

    Carries an optional 1-based line number so loaders can point at the
    offending record.
    """

    def __init__(self, message: str, *, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        prefix = ""
        if path is not None:
            prefix += f"{path}:"
        if line is not None:
            prefix += f"line {line}: "
        super().__init__(prefix + message)


class BackendError(PointrankError):
    """A scorer backend failed after exhausting its retry budget."""


class BackendConfigError(BackendError):
    """The backend is misconfigured and retrying cannot help."""
