"""Exception types raised across the package."""


class MaxkError(Exception):
    """Base class for all package errors."""


class FormatError(MaxkError, ValueError):
    """Malformed input file. ``lineno`` is 1-based when known."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class BoundsError(MaxkError, IndexError):
    pass


class LengthError(MaxkError, ValueError):
    """Binary payload shorter or longer than its header declares."""


class DimensionError(MaxkError, ValueError):
    pass


class NumericError(MaxkError, ValueError):
    pass


class PatternError(MaxkError, ValueError):
    """Sparsity pattern does not match the one recorded in the forward pass."""


class PlanError(MaxkError, ValueError):
    """Edge-group plan does not describe the graph it is applied to."""


class StateError(MaxkError, RuntimeError):
    pass


class ParameterError(MaxkError, ValueError):
    pass


class DivergenceError(MaxkError, FloatingPointError):
    pass
