"""Exception taxonomy shared across the package."""


class StreamTagError(ValueError):
    """Base class for all streamtag errors."""


class ContractViolation(StreamTagError):
    """An operation was called with arguments violating its contract."""


class InputError(StreamTagError):
    """User-supplied data is invalid (bad ids, length mismatches, ...)."""


class ParseError(InputError):
    """A text file could not be parsed; message carries the line number."""


class ConfigurationError(StreamTagError):
    """A configuration value is out of its legal range."""


class CapacityError(StreamTagError):
    """A stream or buffer exceeded its configured maximum size."""


class DegenerateInputError(StreamTagError):
    """Input is structurally valid but degenerate (e.g. fully masked loss)."""


class NumericError(StreamTagError):
    """A computation produced non-finite values."""
