"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(EngineError):
    """An operation was called with arguments that violate its contract."""


class ConfigurationError(EngineError):
    """A configuration or parameter combination is invalid."""


class ModelFormatError(EngineError):
    """A model file is malformed, truncated, or inconsistent."""
