"""lsor: large-signal order reduction of two-time-scale systems.

Derives reduced-order and boundary-layer models from singular perturbed
dynamics, certifies the reduction numerically (reduced-model ISS, uniform
layer stability, perturbation-size bounds, O(eps) error laws), and benchmarks
it on an inverter-dominated microgrid in grid-tied and islanded modes.
"""

from .errors import (
    AssessmentFailed,
    DimensionError,
    EvaluationError,
    GridMismatch,
    InfeasibleConstants,
    LsorError,
    MaxStepsExceeded,
    NewtonDivergence,
    NoFeasibleEpsilon,
    NoTimeScaleSeparation,
    NotAnEquilibrium,
    NotHurwitz,
    SingularFastBlock,
    SingularJacobian,
    SingularNetwork,
    StepSizeUnderflow,
)
from .sysdef import InputSignal, JacobianRequest, SingularSystem, evaluate, jacobian
from .reduction import (
    BoundaryLayerModel,
    QssMap,
    ReducedModel,
    SlowFastPartition,
    build_blm,
    build_rom,
    eval_y_dynamics,
    identify_partition,
    qss_solve,
)
from .integrators import (
    EventSchedule,
    SolverConfig,
    Trajectory,
    integrate_coupled,
    integrate_explicit,
    integrate_stiff,
)
from .assessment import (
    AssessmentReport,
    DomainBox,
    EpsilonBounds,
    EstimationWorkspace,
    KFunctionLin,
    KLFunctionExp,
    check_blm_gas,
    check_growth,
    check_rom_stability,
    epsilon_double_star,
    epsilon_star,
    estimate_lipschitz,
    lyapunov_constants,
    verify_error_bounds,
    verify_iss_envelope,
)
from .harness import LsorConfig, LsorResult, RunBundle, emit, run_lsor, run_scenario

__version__ = "0.1.0"
