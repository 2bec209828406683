"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Raised when shapes, configs or arguments violate an operation's contract."""


class NumericalFailureError(ArithmeticError):
    """Raised when an iteration fails to converge or a loss becomes non-finite."""
