"""Exception hierarchy shared by all lsor modules."""


class LsorError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(LsorError):
    """Vector or matrix dimensions do not match the system definition."""


class EvaluationError(LsorError):
    """A model evaluator returned non-finite values."""

    def __init__(self, msg, point=None):
        super().__init__(msg)
        self.point = point


class NoTimeScaleSeparation(LsorError):
    """No multiplicative gap >= gap_ratio exists in the coefficient spectrum."""


class NewtonDivergence(LsorError):
    """Damped Newton failed to reduce the residual within the iteration budget."""


class SingularJacobian(LsorError):
    """The fast-block Jacobian is numerically singular (implicit-function failure)."""


class NotHurwitz(LsorError):
    """Matrix has an eigenvalue with non-negative real part."""


class SolveFailure(LsorError):
    """A linear-algebra subproblem failed to produce a usable solution."""


class NotAnEquilibrium(LsorError):
    """The supplied point does not zero the vector field within tolerance."""


class EigenvalueFailure(LsorError):
    """Eigenvalue computation did not converge."""


class InfeasibleConstants(LsorError):
    """Estimated constants violate a positivity requirement (gain too weak)."""


class NoFeasibleEpsilon(LsorError):
    """The decay-horizon equation has no solution on the monotone branch."""


class GridMismatch(LsorError):
    """Trajectories are not on a common time grid."""


class StepSizeUnderflow(LsorError):
    """Adaptive step fell below hmin (practical stiffness signal)."""

    def __init__(self, msg, t=None, h=None):
        super().__init__(msg)
        self.t = t
        self.h = h


class MaxStepsExceeded(LsorError):
    """Integration exceeded the configured step budget."""


class SingularNetwork(LsorError):
    """Nodal admittance matrix is singular for the requested solve."""


class SingularFastBlock(LsorError):
    """Fast-block Jacobian singular at the linearization point."""


class AssessmentFailed(LsorError):
    """An assumption of the stability/accuracy assessment does not hold.

    ``assumption`` is 1 (growth), 2 (reduced-model stability) or
    3 (boundary-layer stability); ``detail`` carries the witness.
    """

    def __init__(self, assumption, detail=""):
        super().__init__(f"assumption {assumption} failed: {detail}")
        self.assumption = assumption
        self.detail = detail
