"""Exception types shared across the toolkit."""


class MsdetError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MsdetError, ValueError):
    """Tensor shapes are incompatible; the message names the offending axis."""


class ConfigurationError(MsdetError, ValueError):
    """A spec/config object violates its invariants."""


class UsageError(MsdetError, RuntimeError):
    """An API was called in a way its contract forbids."""


class NumericError(MsdetError, ArithmeticError):
    """A computation produced or encountered non-finite values."""


class FormatError(MsdetError, ValueError):
    """A serialized payload does not match its documented format."""


class ValidationError(MsdetError, ValueError):
    """Input data failed validation (duplicates, malformed records, ...)."""
