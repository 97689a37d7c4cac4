"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit 1, numerical
failures exit 2 and I/O failures (``OSError``) exit 3.
"""


class ValidationError(ValueError):
    """Input data, schema or configuration violates a contract."""


class NumericalError(ArithmeticError):
    """The sampler hit a degenerate numerical state it cannot recover from."""
