"""Exception types shared across the package."""


class PerfBlochError(Exception):
    """Base class for all package errors."""


class DegenerateMap(PerfBlochError, ValueError):
    """A shape perturbation folds over (det Dh_t <= 0 at a queried point)."""


class HoleTooLarge(PerfBlochError, ValueError):
    """The hole leaves the unit cell or swallows every grid node."""


class ConvergenceFailure(PerfBlochError, RuntimeError):
    """The iterative eigensolver ran out of iterations.

    Attributes
    ----------
    residuals : ndarray or None
        Residuals reached when the budget was exhausted.
    k : ndarray or None
        Quasimomentum of the failing solve, when known.
    """

    def __init__(self, message, residuals=None, k=None):
        super().__init__(message)
        self.residuals = residuals
        self.k = k


class SimplicityLost(PerfBlochError, RuntimeError):
    """A tracked eigenvalue stopped being simple during a shape probe.

    The partial probe (samples up to the failure) is kept in ``probe``.
    """

    def __init__(self, message, probe=None):
        super().__init__(message)
        self.probe = probe


class ParseError(PerfBlochError, ValueError):
    """Configuration file is not valid JSON."""


class ValidationError(PerfBlochError, ValueError):
    """A configuration field violates a constraint."""

    def __init__(self, field, constraint, value=None):
        self.field = field
        self.constraint = constraint
        self.value = value
        msg = f"{field}: {constraint}"
        if value is not None:
            msg += f" (got {value!r})"
        super().__init__(msg)


class InsufficientSampling(UserWarning):
    """A band's sampled oscillation is too small to tell it from a flat band."""
