"""Exception types shared across the package."""


class PreconditionError(ValueError):
    """An operation was called with arguments violating its contract."""


class NumericError(RuntimeError):
    """A linear-algebra or floating-point computation failed."""


class FitError(RuntimeError):
    """Likelihood optimization hit a non-finite value.

    Carries the last finite iterate so callers can inspect or resume.
    """

    def __init__(self, message, last_params=None):
        super().__init__(message)
        self.last_params = last_params


class CalibrationError(RuntimeError):
    """Weight calibration could not be solved."""


class SimulationError(RuntimeError):
    """A simulated path became non-finite."""

    def __init__(self, message, path_index=None, step_index=None):
        super().__init__(message)
        self.path_index = path_index
        self.step_index = step_index


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed or has an unsupported version."""
