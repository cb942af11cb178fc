"""Exception types shared across the package."""


class PromptMemError(Exception):
    """Base class; ``kind`` is the machine-readable category."""

    kind = "error"


class ConfigError(PromptMemError, ValueError):
    kind = "configuration"


class DataError(PromptMemError, ValueError):
    kind = "data"


class StateError(PromptMemError, RuntimeError):
    kind = "state"


class NumericError(PromptMemError, FloatingPointError):
    kind = "numeric"


class ParseError(DataError):
    kind = "parse"
