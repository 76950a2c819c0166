"""Solver and simulator for finite-population mean-field stochastic teams
and their deterministic McKean-Vlasov limit."""

__version__ = "0.1.0"

from .lifted import (
    MeasureMDP,
    MeasurePolicy,
    PolicyKernel,
    SymmetricSolution,
    ValueTable,
    bellman_backup,
    build_measure_mdp,
    eta_kernel,
    evaluate_symmetric_policy_exact,
    exact_action_distribution,
    multinomial_count_distribution,
    multinomial_pmf_table,
    realize_exchangeable_action,
    solve_symmetric_restricted,
    value_iteration_discounted,
    value_iteration_finite,
)
from .measures import (
    DEFAULT_ENUMERATION_CAP,
    EmpiricalJointMeasure,
    EmpiricalStateMeasure,
    EnumerationCapError,
    GriddedPolicySet,
    SimplexGrid,
    canonical_assignment,
    compositions,
    enumerate_empirical,
    enumerate_joint_actions,
    num_compositions,
    policy_grid,
    project_to_grid,
    round_to_counts,
    simplex_grid,
)
from .mkv import (
    MkvMDP,
    MkvSolution,
    build_mkv_mdp,
    extract_mf_policy,
    extract_stage_policies,
    flow_trajectory,
    mean_field_flow,
    solve_mkv_discounted,
    solve_mkv_finite,
)
from .model import (
    DiscountedHorizon,
    EnvironmentModel,
    FiniteHorizon,
    MarginalMismatchError,
    ModelError,
    ModelValidationError,
    as_simplex,
    load_model,
    model_from_config,
    save_model,
)
from .sim import (
    ChaosGapRow,
    GapRow,
    LiftedPolicy,
    MarkovCheckReport,
    SimConfig,
    SimReport,
    chaos_gap,
    epsilon_gap,
    simulate_n_agents,
    verify_markov_mf,
)
