"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class FormatError(ValueError):
    """A file does not follow its declared binary layout."""


class CorruptionError(FormatError):
    """A file is truncated or fails its checksum."""


class ConfigError(ValueError):
    """A configuration key or value is invalid."""
