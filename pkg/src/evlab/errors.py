"""Exception and warning types shared across the package."""


class EvlabError(Exception):
    """Base class for all package errors."""


class DimensionError(EvlabError):
    """Operand shapes are incompatible with the requested operation."""


class UsageError(EvlabError):
    """An operation was called with arguments that violate its contract."""


class IngestionError(EvlabError):
    """A trial file could not be parsed.

    Carries the 1-based line number of the offending row when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PersistenceError(EvlabError):
    """A weight or plan file is corrupt or inconsistent.

    Carries the name of the field that failed to decode.
    """

    def __init__(self, message, field=None):
        if field is not None:
            message = f"field '{field}': {message}"
        super().__init__(message)
        self.field = field


class NumericError(EvlabError):
    """A numeric computation produced non-finite values or failed to converge."""


class ConfigError(EvlabError):
    """A run configuration is malformed or internally inconsistent."""


class NumericWarning(UserWarning):
    """An iteration terminated without reaching its tolerance."""
