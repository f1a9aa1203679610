"""Exception types shared across modules."""


class ConfigurationError(ValueError):
    """Invalid experiment, scenario or strategy configuration."""


class ProtocolError(RuntimeError):
    """A call violates the continual-learning protocol (e.g. missing task label)."""


class FormatError(ValueError):
    """Malformed data file."""
