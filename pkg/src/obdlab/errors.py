"""Exception hierarchy shared by every module."""


class ObdError(Exception):
    """Base class for all errors raised by obdlab."""


class ShapeError(ObdError, ValueError):
    """Array shapes or dimensions are inconsistent."""


class DomainError(ObdError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ConfigError(ObdError, ValueError):
    """An experiment config file is missing keys or holds bad values."""


class NumericalAbort(ObdError, RuntimeError):
    """A loss, parameter or gradient became non-finite.

    ``step`` records where it happened (inner step, outer step or training
    step, depending on the caller) so the run can be diagnosed.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
