"""Excited random walks in Markovian cookie environments.

Simulation of the walk and its branching-process representations, exact
finite-state computations that serve as ground truth, and the statistical
machinery that checks the drift parameter's phase laws at desk scale.
"""

from .environment import (
    CookieStack,
    EnvironmentRealization,
    StackChainSpec,
    builtin_environment,
    compute_delta,
    list_builtins,
    load_spec,
    placebo_stack,
    realize_environment,
    reverse_environment,
    save_spec,
    spec_from_json,
    spec_to_json,
    stationary_distribution,
    uniform_ergodicity_diagnostic,
    validate_spec,
)
from .walk import (
    CoinField,
    ConstantCoins,
    WalkPath,
    backtrack_tail,
    down_crossings,
    limit_law_samples,
    run_walk,
    up_crossings_before_return,
    velocity_estimate,
    walk_ensemble,
)
from .branching import (
    AnchorReturn,
    BranchingPath,
    CoupledTriple,
    RenewalRecord,
    SurvivalSamples,
    anchor_return_times,
    backward_step_sample,
    forward_chain_from_coins,
    forward_step_sample,
    moments_at_return,
    renewal_decompose,
    run_chain,
    run_coupled_triple,
    run_hatted,
    survival_statistics,
)
from .oracle import (
    HattedTransition,
    ThetaResult,
    TruncatedChainMatrix,
    backward_step_pmf,
    build_chain_matrix,
    build_vr_matrix,
    exact_hatted_transition,
    exact_survival_tail,
    exact_theta,
    forward_step_pmf,
)
from .analysis import (
    CfDistance,
    GammaCentering,
    PhaseReport,
    StableLawParams,
    TailFitReport,
    absorption_time_samples,
    cf_distance,
    classify_phase,
    empirical_tv,
    exit_probability_exact,
    fit_gaussian_scale,
    gamma_centering,
    lyapunov_classify,
    simulate_squared_bessel,
    squared_bessel_exit,
    stable_cf,
    tail_exponent_fit,
    tv_against_pmf,
)

__version__ = "0.1.0"
