"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code for its failure family.
"""


class CoverEmbedError(Exception):
    exit_code = 1


class ConfigError(CoverEmbedError, ValueError):
    """Inconsistent parameters or infeasible set constructions."""

    exit_code = 2


class InvalidInputError(CoverEmbedError, ValueError):
    exit_code = 3


class DataError(CoverEmbedError):
    exit_code = 3


class FormatError(DataError):
    """A binary artifact failed magic/version/length validation."""


class EmptyMelodyError(DataError):
    """An F0 matrix carries no salience at all."""


class ShapeError(CoverEmbedError, ValueError):
    exit_code = 3


class MiningError(DataError):
    """A batch cannot provide a negative for some anchor."""


class NumericError(CoverEmbedError, ArithmeticError):
    """NaN/Inf surfaced during optimization."""

    exit_code = 4
