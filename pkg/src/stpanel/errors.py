"""Error taxonomy shared across the package.

Two families matter to callers: input problems (bad files, bad values,
bad requests) and numerical failures (singular or indefinite matrices).
The command line maps the first family to exit code 2 and the second
to exit code 3.
"""


class StPanelError(Exception):
    """Base class for every error raised deliberately by this package."""


class ValidationError(StPanelError):
    """Input data or a request violates a documented contract."""


class ParseError(ValidationError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ValidationError):
    """A table is missing columns, has duplicates, or wrong dtypes."""


class DomainError(ValidationError):
    """A value is outside its legal range (coordinates, indices, params)."""


class CrossRefError(ValidationError):
    """A record refers to an entity that does not exist elsewhere."""


class MissingDataError(ValidationError):
    """Required observations are absent and no fill policy allows it."""


class RequestError(ValidationError):
    """A prediction or CLI request cannot be satisfied as stated."""


class NumericalError(StPanelError):
    """A linear algebra step failed beyond the allowed remedies."""


class RankError(NumericalError):
    """A matrix that must have full rank does not."""


class ConditioningError(NumericalError):
    """A factorization failed even after the single jitter retry."""
