"""Exception types shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numeric 4),
so everything user-facing should raise one of them rather than a bare
ValueError.
"""


class CstteError(Exception):
    """Base class for package errors."""


class ConfigError(CstteError):
    """Invalid or inconsistent configuration (unknown key, bad value)."""


class DataError(CstteError):
    """Malformed or insufficient input data."""


class NumericError(CstteError):
    """Non-finite value produced, or a numeric contract violated."""


class ShapeError(CstteError):
    """Operands with incompatible shapes; message names both shapes."""
