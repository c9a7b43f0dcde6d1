"""Exception hierarchy for the UNiTE package."""
from typing import Optional


class UniteError(Exception):
    """Base class for every error raised by this package."""


class DomainError(UniteError, ValueError):
    """Input outside the mathematical domain of an operation."""


class UnsupportedDegreeError(UniteError, ValueError):
    """Angular degree above the tabulated maximum."""


class FeaturizationError(UniteError):
    """The toy mean-field featurizer could not produce features."""


class StatisticsError(UniteError, ValueError):
    """Normalization statistics are unusable (non-positive scale)."""


class MissingParameterError(UniteError, KeyError):
    """A per-element table has no entry for the requested element."""

    def __init__(self, table: str, element: int, record: Optional[str] = None):
        self.table = table
        self.element = element
        self.record = record
        where = f" (record {record})" if record is not None else ""
        super().__init__(f"{table} has no entry for element Z={element}{where}")

    def __str__(self) -> str:
        return self.args[0]


class TrainingError(UniteError):
    """Raised when an optimization step cannot proceed."""

    def __init__(self, message: str, parameter: Optional[str] = None):
        self.parameter = parameter
        super().__init__(message if parameter is None else f"{message}: {parameter}")


class DatasetError(UniteError, ValueError):
    """Malformed dataset record; carries the 1-based line number."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class CheckpointError(UniteError):
    """Checkpoint manifest and blob are inconsistent or unreadable."""


class ConfigError(UniteError, ValueError):
    """Run configuration failed validation."""


class UnknownSuiteError(UniteError, ValueError):
    """Requested check suite does not exist."""
