"""
Exception hierarchy shared by every twinpress component.

Each failure kind raised by the library has exactly one class here, so callers
(and the CLI) can distinguish configuration mistakes from bad data files,
numerical preconditions, and lifecycle misuse.
"""

from typing import Optional


class TwinError(Exception):
    """Base class for all twinpress errors."""


class ConfigurationError(TwinError, ValueError):
    """Invalid configuration value.

    Attributes:
        key (str, optional): Dotted config key that failed validation
    """

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class DomainError(TwinError, ValueError):
    """An operation was called outside its mathematical domain."""


class DimensionError(TwinError, ValueError):
    """Vector or matrix shapes do not agree."""


class ParseError(TwinError, ValueError):
    """Malformed input file content.

    Attributes:
        line (int, optional): 1-based line number in the source file
    """

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(TwinError, ValueError):
    """Input file parsed but violates the dataset schema."""


class TwinStateError(TwinError, RuntimeError):
    """A component was used before it was initialized or trained."""


class ActionError(TwinError, ValueError):
    """A caching action is not valid for the current cache state."""


class DegenerateServerError(TwinError, ValueError):
    """FLTrust server direction has zero norm."""


class DegenerateAttackError(TwinError, ValueError):
    """Attack direction is zero, so no poisoned update can be crafted."""


class UndefinedMetricError(TwinError, ValueError):
    """A metric is undefined for the given inputs.

    Attributes:
        report: The partially filled report (metrics that are defined)
    """

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)


class RunIOError(TwinError, OSError):
    """Missing or unwritable run artifact."""
