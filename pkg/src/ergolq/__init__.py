"""Numerical laboratory for long-run average linear-quadratic control
with periodically forced, path-dependent coefficients.

The package simulates the controlled state, solves the periodic matrix
and vector backward equations by regression Monte Carlo, assembles the
optimal feedback law, and verifies its long-run optimality against
independent simulation and ODE references.
"""

from .coefficients import (
    CoefficientFn,
    FeedbackLaw,
    PathPrefix,
    PeriodicCoefficientSet,
    ScenarioFormatError,
    builtin_scenarios,
    check_positivity,
    constant_coeff,
    constant_feedback,
    harmonic_coeff,
    load_scenario,
    perturbed_feedback,
    save_scenario,
    tanh_sum_coeff,
    theta_shift,
    zero_feedback,
)
from .sde_engine import (
    PathBundle,
    StabilityReport,
    StateTrajectory,
    contraction_check,
    derive_seed,
    estimate_gram_lower_bound,
    estimate_second_moment_decay,
    export_moments_csv,
    export_trajectory_csv,
    simulate_brownian,
    simulate_closed_loop,
    simulate_fundamental,
)
from .bsde_engine import (
    BsdeGridSolution,
    ConvergenceError,
    RegressionBasis,
    RegressionError,
    export_node_table_csv,
    representation_check,
    solution_coeff,
    solve_linear_matrix_bsde,
    solve_vector_bsde,
)
from .riccati import (
    RiccatiSolution,
    default_stabilizer,
    kleinman_solve,
    reduce_cross_term,
    riccati_residual,
    solve_stochastic_riccati,
    stabilizer_check,
)
from .verify import (
    AcceptanceContext,
    CheckOutcome,
    run_acceptance,
    run_scenario_checks,
)
from .ergodic import (
    BurnInError,
    CostEstimate,
    OptimalControl,
    RandomPeriodicState,
    ScanResult,
    burn_in_state,
    completion_identity_check,
    completion_of_square_check,
    export_scan_csv,
    finite_horizon_cost,
    fit_quadratic_excess,
    optimal_feedback,
    optimality_scan,
    single_period_cost,
    value_function,
)

__version__ = "0.1.0"

__all__ = [
    "BsdeGridSolution",
    "BurnInError",
    "CoefficientFn",
    "ConvergenceError",
    "CostEstimate",
    "FeedbackLaw",
    "OptimalControl",
    "PathBundle",
    "PathPrefix",
    "PeriodicCoefficientSet",
    "RandomPeriodicState",
    "RegressionBasis",
    "RegressionError",
    "RiccatiSolution",
    "ScanResult",
    "ScenarioFormatError",
    "StabilityReport",
    "StateTrajectory",
    "builtin_scenarios",
    "AcceptanceContext",
    "CheckOutcome",
    "burn_in_state",
    "completion_identity_check",
    "check_positivity",
    "completion_of_square_check",
    "constant_coeff",
    "constant_feedback",
    "contraction_check",
    "default_stabilizer",
    "derive_seed",
    "estimate_gram_lower_bound",
    "estimate_second_moment_decay",
    "export_moments_csv",
    "export_node_table_csv",
    "export_scan_csv",
    "export_trajectory_csv",
    "finite_horizon_cost",
    "fit_quadratic_excess",
    "harmonic_coeff",
    "kleinman_solve",
    "load_scenario",
    "optimal_feedback",
    "optimality_scan",
    "perturbed_feedback",
    "reduce_cross_term",
    "representation_check",
    "riccati_residual",
    "run_acceptance",
    "run_scenario_checks",
    "save_scenario",
    "simulate_brownian",
    "simulate_closed_loop",
    "simulate_fundamental",
    "single_period_cost",
    "solution_coeff",
    "solve_linear_matrix_bsde",
    "solve_stochastic_riccati",
    "solve_vector_bsde",
    "stabilizer_check",
    "tanh_sum_coeff",
    "theta_shift",
    "value_function",
    "zero_feedback",
    "__version__",
]
