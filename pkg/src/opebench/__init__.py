"""Off-policy evaluation workbench for tabular treatment policies.

The modules follow the pipeline order: :mod:`core` (trajectories and I/O),
:mod:`representation` (k-means states and dose bins), :mod:`policies`
(behavior estimation, model fitting, planning), :mod:`estimators`
(importance sampling, doubly robust, model-based), :mod:`diagnostics`
(effective sample size, matched sequences, U-curves), :mod:`simulator`
(confounded environment with exact values) and :mod:`harness`
(repeated train/test experiments).
"""
from .core import (
    CohortStats,
    Dataset,
    DatasetError,
    EvalConfig,
    Outcome,
    Trajectory,
    cohort_stats,
    compute_return,
    discounted_returns,
    expected_value_approx,
    flat_action,
    load_dataset,
    partition,
    save_dataset,
    split_action,
)
from .diagnostics import (
    UCurve,
    audit_weights,
    dose_histogram,
    matched_sequences,
    u_curve,
    weight_series,
)
from .estimators import (
    ESTIMATORS,
    EstimatorResult,
    Flag,
    SupportViolation,
    WeightSeries,
    dr_estimate,
    importance_ratios,
    is_estimate,
    kish_ess,
    model_based_estimate,
    pdis_estimate,
    run_estimators,
    wdr_estimate,
    wis_estimate,
    wpdis_estimate,
)
from .harness import ExperimentReport, ExperimentSpec, emit_report, representation_agreement, run_experiment
from .policies import (
    ConvergenceError,
    MDPModel,
    QFunction,
    TabularPolicy,
    baseline_policy,
    estimate_behavior_policy,
    evaluate_policy_q,
    fit_mdp,
    greedy_policy,
    soften_policy,
    value_iteration,
)
from .representation import (
    ClusterModel,
    DoseBins,
    assign_state,
    assign_states,
    discretize,
    fit_dose_bins,
    fit_kmeans,
    policy_agreement,
)
from .simulator import (
    SCENARIOS,
    GroundTruth,
    SimConfig,
    build_ground_truth,
    enumerate_value,
    exact_value,
    sample_dataset,
    scenario,
)

__version__ = "0.1.0"
