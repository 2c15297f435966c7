"""Exception hierarchy shared by all selftrig modules."""


class SelfTrigError(Exception):
    """Base class for every error raised by selftrig."""


class DimensionError(SelfTrigError, ValueError):
    pass


class DomainError(SelfTrigError, ValueError):
    pass


class InfeasibleError(SelfTrigError):
    """A stability certificate (or LMI) cannot be satisfied.

    ``details`` carries the numbers needed to diagnose the failure,
    e.g. the spectral radius versus the required decay bound.
    """

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class NumericError(SelfTrigError, ArithmeticError):
    pass


class DivergenceError(SelfTrigError):
    """Simulation produced a non-finite state; ``trace`` holds the prefix."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ScenarioError(SelfTrigError, ValueError):
    """Invalid or inconsistent scenario description."""
