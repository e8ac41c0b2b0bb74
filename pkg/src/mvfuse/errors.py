"""Error taxonomy shared across the toolkit.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
NumericError -> 4. ShapeError is a programming-contract violation and is
allowed to surface as an ordinary traceback.
"""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration, preset, or command-line usage."""


class DataError(ValueError):
    """Malformed dataset, manifest, prediction, or reference input."""


class NumericError(ArithmeticError):
    """Training aborted on a non-finite value."""
