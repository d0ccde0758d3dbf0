"""Exception types shared across the package."""


class GapracerError(Exception):
    """Base class for package errors."""


class ShapeError(GapracerError):
    """Operand dimensions are incompatible."""


class NumericError(GapracerError):
    """An operation left the finite-float domain."""


class ContractError(GapracerError):
    """An API precondition was violated by the caller."""


class ConfigError(GapracerError):
    """Invalid configuration value or combination."""


class DataError(GapracerError):
    """Malformed or inconsistent data file."""
