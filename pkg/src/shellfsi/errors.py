"""Exception hierarchy shared by all solver modules."""


class ShellFSIError(Exception):
    """Base class for every error raised by the package."""


class DegenerateDisplacement(ShellFSIError):
    """Displacement exceeds the tubular safety margin."""


class OutsideDomain(ShellFSIError):
    """A query point lies outside the (reference or deformed) domain."""


class NoConvergence(ShellFSIError):
    """A Newton iteration did not converge."""


class NonPositiveJacobian(ShellFSIError):
    """det(grad Psi) <= 0 somewhere: the deformed domain has degenerated."""


class DegenerateGeometry(ShellFSIError):
    """Geometric non-degeneracy (n . n_eta > 0, non-zero area element) failed.

    ``margins`` carries the last margin report when available.
    """

    def __init__(self, message, margins=None):
        super().__init__(message)
        self.margins = margins


class SolveFailure(ShellFSIError):
    """A linear solve failed; ``info`` holds iteration diagnostics."""

    def __init__(self, message, info=None):
        super().__init__(message)
        self.info = info or {}


class IncompatibleFlux(ShellFSIError):
    """Boundary data violate the Gauss (net flux) constraint."""


class BudgetExceeded(ShellFSIError):
    """Displacement is outside the height/Lipschitz budget of an operator."""


class NoContraction(ShellFSIError):
    """Fixed-point iterates stopped contracting."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DtUnderflow(ShellFSIError):
    """Adaptive time step shrank below the configured minimum."""


class InvalidPair(ShellFSIError):
    """Serrin exponent pair violates 2/r + 3/s <= 1."""


class MarginExceeded(ShellFSIError):
    """Displacement difference too large for the cross-domain map."""


class ParseError(ShellFSIError):
    """Scenario file could not be parsed."""


class CompatibilityError(ShellFSIError):
    """Scenario data violate a compatibility condition."""


class FormatError(ShellFSIError):
    """Snapshot file is malformed."""
