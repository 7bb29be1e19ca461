"""Seeded simulator for local descent methods in federated learning."""

from .conditions import (
    ConditionReport,
    check_lfgd,
    check_lfsgd_nonconvex,
    check_lfsgd_pl,
    check_nfsgd,
)
from .engine import (
    LearningRateSchedule,
    RunConfig,
    WorkerState,
    aggregate_and_broadcast,
    apply_controlled_averaging,
    local_step,
    run,
    run_lfgd,
    run_lfsgd,
    run_nfsgd,
)
from .errors import (
    DegenerateDiversity,
    DisconnectedTopology,
    InvalidArgument,
    InvalidMixing,
    NumericalDivergence,
    RateFitUnavailable,
)
from .metrics import Trajectory, ensemble_mean, fit_rate, oracle_sync_gd, oracle_sync_sgd
from .problem import (
    FederatedProblem,
    LeastSquaresObjective,
    LogisticObjective,
    ProblemSpec,
    QuadraticObjective,
    diversity_upper_bound,
    global_value_and_gradient,
    gradient_diversity,
    local_gradient,
    make_synthetic_problem,
    quadratic_problem,
)
from .sampling import (
    DeviceSample,
    RngStream,
    fit_variance_constants,
    sample_devices,
    stochastic_gradient,
)
from .topology import MixingMatrix, make_topology, validate_mixing

__all__ = [name for name in dir() if not name.startswith("_")]
