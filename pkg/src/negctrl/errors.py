"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` to exit code 2 and
:class:`NumericalError` to exit code 3.
"""


class NegCtrlError(Exception):
    """Base class for all package errors."""


class ValidationError(NegCtrlError, ValueError):
    """Malformed input: bad files, flags, specs or shapes."""


class NumericalError(NegCtrlError, ArithmeticError):
    """A fit or solve failed (rank deficiency, separation, divergence)."""
