"""Data-based moving horizon estimation for linear systems.

The estimator represents window trajectories as linear combinations of the
columns of Hankel matrices built from one offline, noise-free experiment, so
no model identification step is needed.
"""
from .analysis import (
    DEFAULT_LAMBDA,
    CertificateWarning,
    ErrorMetrics,
    RgesConstants,
    RgesReport,
    RunRecord,
    compute_rges_constants,
    error_metrics,
    kalman_baseline,
    max_rho,
    min_horizon,
    rges_bound,
    rges_envelope,
    verify_rges,
)
from .estimator import (
    Estimate,
    EstimationError,
    MheConfig,
    MheEstimator,
    SetupError,
    StateBox,
    new_estimator,
    run_estimator,
)
from .hankel import (
    DepthError,
    HankelMatrix,
    OfflineDataset,
    PreconditionError,
    build_hankel,
    check_consistency,
    collect_dataset,
    generate_pe_input,
    hankel_rank,
    is_persistently_exciting,
    make_dataset,
    max_pe_order,
    span_residual,
)
from .lti import (
    CapabilityError,
    EuossConstants,
    LtiSystem,
    NumericalError,
    ObserverDesign,
    ShapeError,
    Trajectory,
    check_controllability,
    check_detectability,
    compute_euoss_constants,
    design_observer,
    paper_example_system,
    simulate,
)
from .qp import DenseQp, QpError, QpSolution, kkt_residual, solve_qp, solve_qp_active_set

__version__ = "0.1.0"
