"""Exception hierarchy for circfit.

Fitting and selection routines distinguish three broad failure modes:
bad inputs (caller error), a concentration value at which the local
estimator does not exist (maskable), and a selection run in which no
candidate survived.
"""


class CircFitError(Exception):
    """Base class for all circfit errors."""


class InvalidArgumentError(CircFitError, ValueError):
    """Malformed or out-of-domain argument (nonfinite angle, bad degree, ...)."""


class ResponseDomainError(CircFitError, ValueError):
    """Response value outside the support of the requested family."""


class MomentDivergenceError(CircFitError):
    """A kernel moment integral diverged."""

    def __init__(self, j, detail=""):
        self.j = j
        msg = f"kernel moment integral diverges for j={j}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DegenerateKernelError(CircFitError):
    """Kernel moment matrix is singular or otherwise unusable."""


class UnsupportedParityError(CircFitError):
    """(p - nu) must be odd for the requested constant."""


class DegenerateConstantError(CircFitError):
    """A kernel-dependent constant degenerates to zero."""


class InfeasibleKappaError(CircFitError):
    """The local estimator does not exist (or is numerically unusable)
    at this concentration; selectors mask such candidates."""


class SelectionFailureError(CircFitError):
    """No feasible concentration candidate remained after masking."""


class ModelSpecError(CircFitError):
    """Simulation model specification is inconsistent (e.g. negative mean)."""


class DegenerateTargetError(CircFitError):
    """Target curve has zero integrated square; relative ISE undefined."""


class InvalidDesignError(CircFitError):
    """Parametric design block is rank deficient."""
