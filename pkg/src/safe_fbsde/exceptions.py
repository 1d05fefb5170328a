"""Failure types shared across the package."""


class InfeasibleProblem(RuntimeError):
    """The safety QP has an empty (or numerically empty) feasible set."""


class NumericalFailure(RuntimeError):
    """A linear system inside a solver stayed singular beyond regularization."""


class SingularKKT(RuntimeWarning):
    """Backward KKT system was rank-deficient; diagonal regularization used."""


class UnsafeStart(RuntimeError):
    """Rollout asked to start outside the safe set."""


class SafetyViolation(RuntimeError):
    """A rollout state left the safe set; the run must abort loudly."""
