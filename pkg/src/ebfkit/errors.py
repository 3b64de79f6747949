"""Exception hierarchy shared across the package.

User-facing tools map ``UserInputError`` to exit code 2 and
``NumericalError`` to exit code 3.
"""


class EbfkitError(Exception):
    pass


class UserInputError(EbfkitError, ValueError):
    """Bad input: formulas, data files, unknown columns or terms."""


class FormulaError(UserInputError):
    """Formula syntax error; carries the byte offset of the offending token."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(UserInputError):
    """Dataset problems: missing columns, non-finite values, empty groups."""


class NumericalError(EbfkitError, RuntimeError):
    """Numerical failure that survived the documented retry paths."""


class FitError(NumericalError):
    """Model fitting failed (non-convergence, divergent chain, ...)."""
