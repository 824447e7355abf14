"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed input data: bad shapes, bad file contents, empty masks."""


class NumericalError(RuntimeError):
    """Numerical failure: non-finite intermediates, diverging solves."""
