"""Exception types shared across the simulator."""


class FedProtoKDError(Exception):
    """Base class for all simulator errors."""


class ShapeError(FedProtoKDError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(FedProtoKDError, ValueError):
    """An argument lies outside the domain of an operation."""


class UsageError(FedProtoKDError, RuntimeError):
    """An API was called in the wrong state (e.g. backward on an untracked loss)."""


class ConfigurationError(FedProtoKDError, ValueError):
    """Inconsistent protocol inputs or experiment configuration."""


class ParseError(FedProtoKDError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PrivacyError(FedProtoKDError, PermissionError):
    """Protocol code tried to read data that is withheld from it."""


class SchemaError(ParseError):
    """A metrics file lacks expected columns or disagrees with another file's layout."""
