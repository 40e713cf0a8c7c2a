"""Exception types raised by the numerical routines."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature ran out of subdivisions before meeting tolerance."""


class AmbiguousBracketError(RuntimeError):
    """More than one sign change of H was found while bracketing a root."""

    def __init__(self, message, brackets):
        super().__init__(message)
        self.brackets = list(brackets)


class NoSignChangeError(RuntimeError):
    """A bracketing search could not find a sign change."""


class BlowUpError(RuntimeError):
    """A particle velocity left the admissible ball during a simulation."""


class SupportMismatchError(ValueError):
    """Histogram range does not cover the analytic density."""
