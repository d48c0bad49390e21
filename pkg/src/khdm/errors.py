"""Exception types and process exit codes shared across the package."""


class KhdmError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(KhdmError):
    """An argument or intermediate value violated an operation's contract."""


class DataFormatError(KhdmError):
    """An artifact file is missing, truncated, or has the wrong layout."""


class DegenerateDataError(KhdmError):
    """Input data carries no usable signal (e.g. an all-zero snapshot matrix)."""


class TuningFailureError(KhdmError):
    """Every hyperparameter trial aborted; no ranking can be produced."""


class NumericalError(KhdmError):
    """Base class for runtime numerical failures."""


class ConvergenceError(NumericalError):
    """An iterative solver exhausted its iteration cap."""


class DivergenceError(NumericalError):
    """A trajectory left the admissible region during integration."""

    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


class StabilityError(NumericalError):
    """A time stepper blew up; usually cured by a smaller step size."""


class TrainingAbortedError(NumericalError):
    """Training produced non-finite losses for several consecutive epochs.

    Carries the loss history recorded up to the abort so partial runs can
    still be inspected.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
