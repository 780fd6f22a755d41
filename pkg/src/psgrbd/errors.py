"""Exception hierarchy shared by every module of the package."""


class PsgError(Exception):
    """Base class for all package errors."""


class ArgumentError(PsgError, ValueError):
    """An argument violates a documented precondition."""


class ParseError(PsgError):
    """A file could not be decoded.

    Parameters
    ----------
    message : str
        Human readable description.
    offset : int, optional
        Byte offset (for binary inputs) or line number (for text inputs) at
        which decoding failed.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class MontageError(PsgError):
    """The recording does not contain the channels needed for the montage."""

    def __init__(self, message, missing=()):
        self.missing = tuple(missing)
        super().__init__(message)


class DegenerateRecordingError(PsgError):
    """The recording is too short (or otherwise unusable) for analysis."""


class EmptyGridError(PsgError):
    """A signal is shorter than a single scoring epoch."""


class SchemaError(PsgError):
    """Feature schemas of two objects do not match."""


class UndefinedError(PsgError):
    """A statistic is mathematically undefined for the given input."""


class MissingMetricError(PsgError):
    """A subject metric required by a detector is missing."""

    def __init__(self, names):
        self.names = tuple(names)
        super().__init__("missing metrics: " + ", ".join(self.names))


class ConfigError(PsgError):
    """Invalid run configuration."""


class FoldCountError(ArgumentError, ConfigError):
    """The configured fold count exceeds the number of subjects."""
