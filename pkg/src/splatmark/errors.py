"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a type invariant, schema, or precondition."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
