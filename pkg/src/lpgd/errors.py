"""Exception hierarchy shared by the solver, envelope and update modules."""


class LPGDError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(LPGDError, ValueError):
    pass


class InvalidProblem(LPGDError, ValueError):
    """Problem data violates an invariant (asymmetric H, lo > hi, NaN, ...)."""


class SolverFailure(LPGDError):
    """The iterative solver could not produce an accurate saddle point."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class MaxIterationsExceeded(SolverFailure):
    """Residuals were not met; ``report`` holds the best iterate found."""


class InfeasibleProblem(SolverFailure):
    """The equality constraints cannot be met inside the box."""


class TooLarge(LPGDError, ValueError):
    """Instance exceeds the enumeration bound of the exact oracle."""


class Infeasible(LPGDError):
    """Exact oracle found no box point satisfying the equalities."""


class InfiniteDivergence(LPGDError):
    """The point lies outside the effective feasible set, divergence is +inf."""


class UnsupportedLoss(LPGDError, ValueError):
    pass


class NoDuals(LPGDError, ValueError):
    pass


class SingularSystem(LPGDError):
    pass


class StrictComplementarityViolated(LPGDError):
    pass


class ConfigError(LPGDError, ValueError):
    pass


class TrainingDiverged(LPGDError):
    pass
