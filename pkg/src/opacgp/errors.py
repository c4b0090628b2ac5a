"""Exception types raised across the package."""


class OpacgpError(Exception):
    pass


class InputError(OpacgpError, ValueError):
    """Bad shapes, empty inputs, or out-of-range arguments."""


class NumericalError(OpacgpError, ArithmeticError):
    """A factorization failed or a computation produced non-finite values."""


class SchemaError(InputError):
    """A requested CSV column does not exist."""
