class AigcSimError(Exception):
    """Base class for package errors."""


class InvalidArgument(AigcSimError, ValueError):
    pass


class NumericError(AigcSimError, ArithmeticError):
    pass


class NotFound(AigcSimError, KeyError):
    pass


class ConfigError(AigcSimError, ValueError):
    """Malformed or invalid experiment configuration."""
