"""Exception types shared across the package."""


class SpitError(Exception):
    """Base class for all package-specific errors."""


class SingularBasisError(SpitError, ValueError):
    """Lattice basis is singular or violates the cell nondegeneracy bounds."""


class InfeasibleSlackError(SpitError, RuntimeError):
    """A barrier evaluation saw a nonpositive slack."""


class MidpointInfeasibleError(SpitError, RuntimeError):
    """The integrator's midpoint left the feasible region; caller should backtrack."""


class LinearizedInfeasibleError(SpitError, RuntimeError):
    """The linearized feasibility QP has no solution (or the solver stalled)."""


class FeasibilityError(SpitError, RuntimeError):
    """A safeguard could not restore the strict-feasibility margin."""


class RunAbort(SpitError, RuntimeError):
    """The trajectory loop hit an unrecoverable condition (e.g. vanishing step)."""
