"""Exception types raised by twotone.

Physical-input problems raise ``ValueError`` directly. The classes below cover
configuration failures and numerical failures so the command-line front end can
map them to distinct exit codes.
"""
from typing import Optional


class ConfigError(ValueError):
    """Configuration file or command-line values could not be resolved."""


class NumericalError(RuntimeError):
    """Base class for numerical failures."""


class EigenSolverError(NumericalError):
    """The eigenvalue solver did not converge or returned non-finite values."""


class UnstableSpectrumError(NumericalError):
    """A noise spectrum was requested at a linearly unstable point."""

    def __init__(self, margin: float, message: Optional[str] = None) -> None:
        self.margin = margin
        super().__init__(
            message
            or f"Spectrum undefined at unstable point (margin = {margin:.6g} > 0)"
        )


class NoGrowthDetected(NumericalError):
    """A growth-rate fit was requested on a trajectory that does not grow."""


class IntegrationError(NumericalError):
    """Non-finite state encountered while integrating a trajectory."""

    def __init__(self, step: int, message: Optional[str] = None) -> None:
        self.step = step
        super().__init__(message or f"Non-finite state at step {step}")
