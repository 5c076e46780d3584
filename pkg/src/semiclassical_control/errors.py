"""Exception types raised across the package."""


class SCLError(Exception):
    """Base class for all package errors."""


class MeanNotZero(SCLError):
    """A field that must have zero mean does not."""


class NotInSpace(SCLError):
    """A trigonometric polynomial carries modes outside the admissible space."""


class PositivityLost(SCLError):
    """A density became non-positive where positivity is required."""


class BlowUp(SCLError):
    """The density fell below the admissible floor during integration."""


class Instability(SCLError):
    """A time integrator produced non-finite or runaway values."""


class OscillationInsufficient(SCLError):
    """A reduction stage could not reach its tolerance within the oscillation schedule."""

    def __init__(self, message, best_gap=None, best_osc_n=None):
        super().__init__(message)
        self.best_gap = best_gap
        self.best_osc_n = best_osc_n


class TargetUnreached(SCLError):
    """The control pipeline finished without meeting the requested terminal tolerance."""

    def __init__(self, message, best_error=None, report=None):
        super().__init__(message)
        self.best_error = best_error
        self.report = report


class VacuumRegion(SCLError):
    """The density is too small for the velocity to be well defined."""


class ConfigError(SCLError):
    """A scenario configuration is malformed."""


class InvalidSpec(SCLError, ValueError):
    """Target data violates mass equality, positivity or zero-mean conditions."""
