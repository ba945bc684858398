"""Desk-scale offline behavior distillation laboratory."""

from obdlab.errors import ConfigError, DomainError, NumericalAbort, ObdError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DomainError",
    "NumericalAbort",
    "ObdError",
    "ShapeError",
    "__version__",
]
