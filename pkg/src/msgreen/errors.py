"""Exception types raised across the package."""


class InputShapeError(ValueError):
    """Input array does not match the expected dimension."""


class NumericalOverflowError(FloatingPointError):
    """A non-finite value appeared while evaluating a network.

    ``point`` holds the first offending input row (or ``None`` if unknown).
    """

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class SamplingError(RuntimeError):
    """Rejection sampling ran out of attempts."""


class SolverError(RuntimeError):
    """A linear solve failed (singular system or no convergence)."""


class ConfigError(ValueError):
    """An experiment or problem configuration is invalid."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or divergence).

    ``step`` is the optimizer step at which the problem was detected.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
