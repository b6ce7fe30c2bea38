class DimensionError(ValueError):
    """Array shapes do not compose."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class InfeasibleRelationError(ValueError):
    """A relation matrix (or requested shape) violates the row/column constraints."""


class BudgetExceededError(RuntimeError):
    """Brute-force enumeration would exceed its state budget."""
