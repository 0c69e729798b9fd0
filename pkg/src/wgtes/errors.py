"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the physical domain of an operation."""


class DataError(ValueError):
    """Measured or tabulated input data is malformed or inconsistent."""


class ConfigError(ValueError):
    """A run configuration failed schema validation."""


class StabilityError(RuntimeError):
    """A time-stepping scheme failed to produce a finite, converged state."""


class ConvergenceError(RuntimeError):
    """An iterative fit did not converge.

    The best iterate found so far is kept on ``best`` so callers can inspect it.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
