"""Exception hierarchy.

User-facing problems (bad config, bad input files, API misuse) derive from
``UserError``; numerical breakdowns derive from ``NumericError``. The CLI maps
the two families to exit codes 1 and 2.
"""


class UserError(Exception):
    pass


class ConfigurationError(UserError, ValueError):
    pass


class ParseError(UserError, ValueError):
    pass


class ShapeError(UserError, ValueError):
    pass


class ContractError(UserError, TypeError):
    """An operation was called in a way its contract forbids."""


class DomainError(UserError, ValueError):
    """Argument outside the mathematical domain of a function."""


class NumericError(ArithmeticError):
    pass


class ConvexHullViolation(NumericError):
    """Zero is not in the interior of the convex hull of the moment rows."""


class EstimationError(NumericError):
    pass


class InferenceError(NumericError):
    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = list(failures or [])
