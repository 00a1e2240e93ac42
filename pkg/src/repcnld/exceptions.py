"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination of values.

    ``violations`` lists every constraint that failed, one message each.
    """

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations) if violations is not None else [message]


class EvaluationError(RuntimeError):
    """A target model produced a non-finite energy or gradient."""

    def __init__(self, message, position=None, iteration=None):
        super().__init__(message)
        self.position = position
        self.iteration = iteration


class SolveError(RuntimeError):
    """A forward or costate solve produced a non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NumericalError(RuntimeError):
    """A numerical routine failed its tolerance or definiteness check."""


class DegenerateSeriesError(ValueError):
    """Series statistics requested for a constant or too-short series."""
