"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or mismatched geometry/shape settings."""


class DataError(ValueError):
    """Malformed or inconsistent input data (logs, labels, checkpoints)."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""
