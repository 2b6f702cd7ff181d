"""Exception taxonomy shared by every subsystem.

The CLI maps these onto exit codes: config errors -> 2, data/format
errors -> 3, numeric failures -> 4.
"""


class AfiError(Exception):
    """Base class for all package errors."""


class ConfigError(AfiError, ValueError):
    """Invalid configuration, preset, or layer wiring."""


class DimensionError(ConfigError):
    """Operand shapes do not conform."""


class DataError(AfiError, ValueError):
    """Malformed or out-of-range data."""


class FormatError(DataError):
    """A binary file does not follow its declared layout."""


class NumericError(AfiError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(AfiError, RuntimeError):
    """A caller violated an operation's preconditions."""
