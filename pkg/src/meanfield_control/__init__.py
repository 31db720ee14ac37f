"""Optimal control of interacting particle ensembles steered by control agents.

Solves the particle steering problem by adjoint-based H^1 gradient descent,
implements three equivalent costate representations (backward ODE, Picard
fixed point on characteristics, scalar transport in 1-d), and ships the
stability and mean-field convergence experiments used to validate them.
"""

__version__ = "0.1.0"

from .core import (
    AdjointTrajectory,
    ConfigError,
    ControlPath,
    InitialSpec,
    NumericsError,
    ParticleEnsemble,
    RunConfig,
    TimeGrid,
    Trajectory,
    build_time_grid,
    config_from_toml,
    config_hash,
    config_to_toml,
    control_l2_distance_sq,
    load_config,
    sample_initial_ensemble,
)
from .kernels import (
    KernelSpec,
    dobrushin_constants,
    kernel_bounds,
    kernel_eval,
    kernel_jacobian,
    zero_kernel,
)
from .costs import (
    CostSpec,
    build_cost,
    control_effort,
    delta_mu_j1,
    j1_w2_lipschitz_constant,
    running_cost,
    total_cost,
    tracking_cost,
    zero_running_cost,
)
from .dynamics import (
    DobrushinReport,
    dobrushin_gap,
    forward_solve,
    linearized_solve,
    velocity,
)
from .adjoint import (
    CharacteristicCrossing,
    PicardNonConvergence,
    adjoint_solve_backward,
    adjoint_solve_picard,
    adjoint_uniform_bound,
    l2_adjoint_solve_1d,
    phase_space_diagnostics,
)
from .gradient import (
    GradientReport,
    OptimizeResult,
    optimality_residual,
    optimize,
    reduced_gradient,
    solve_control_problem,
)
from .wasserstein import (
    Coupling,
    duplicate_points,
    w2,
    w2_1d,
    w2_assignment,
    w2_with_duplication,
)
from .experiments import (
    ConsistencyReport,
    RateReport,
    SuiteReport,
    experiment_adjoint_consistency,
    experiment_convergence_rate,
    experiment_gradient_suite,
)

__all__ = [name for name in dir() if not name.startswith("_")]
