"""Exception taxonomy shared by all odonet modules.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
data problems (parsing, ingestion, domain violations) exit 2, numeric
failures exit 3.
"""


class OdonetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(OdonetError):
    """Tensor shapes are inconsistent; the message names the offending axis."""


class DomainError(OdonetError):
    """A value lies outside the documented domain of an operation."""


class ContractError(OdonetError):
    """An operation precondition was violated by the caller."""


class NumericError(OdonetError):
    """A non-finite value appeared; carries the producing op when known."""

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


class ParseError(OdonetError):
    """A text or binary input could not be parsed; carries a line number when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class ConfigError(OdonetError):
    """A run configuration or model configuration is invalid."""


class IngestionError(OdonetError):
    """Dataset ingestion failed (missing files, inconsistent counts)."""


class CheckpointVersionError(OdonetError):
    """Checkpoint format version differs from the one this build writes."""

    def __init__(self, found: int, expected: int):
        super().__init__(
            f"checkpoint format version {found} is not supported (expected {expected})"
        )
        self.found = found
        self.expected = expected
