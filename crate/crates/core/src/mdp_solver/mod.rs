//! Average-reward evaluation and policy iteration.

mod evaluation;
mod iteration;
mod policy;
mod stationary;

pub use evaluation::{
    evaluate_chain, evaluate_policy, policy_transition_matrix, EvaluationBasis, GainBiasSolution,
    RESIDUAL_TOL,
};
pub use iteration::{
    bellman_residual, default_initial_policy, improve_policy, policy_iteration, policy_metrics,
    MdpSolver, PolicyIterationOutcome, PolicyMetrics, IMPROVEMENT_TOL, MAX_POLICY_ITERATIONS,
};
pub use policy::{
    read_policy_table, threshold_report, threshold_violations, write_policy_table,
    write_threshold_report, StationaryDeterministicPolicy, ThresholdRow,
};
pub use stationary::{invariance_defect, recurrent_classes, stationary_distribution};

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("policy has {got} entries, model has {expected} states")]
    PolicyShape { expected: usize, got: usize },
    #[error("action at state {state} is not in the model's action set")]
    InvalidAction { state: usize },
    #[error("policy table: {0}")]
    PolicyTable(String),
    #[error("evaluation system is rank deficient")]
    RankDeficient,
    #[error("evaluation residual {residual:e} exceeds tolerance (scale {scale:e})")]
    EvaluationFailed { residual: f64, scale: f64 },
    #[error("policy has {} recurrent classes", classes.len())]
    NotUnichain { classes: Vec<Vec<usize>> },
    #[error("stationary system is singular")]
    SingularStationarySystem,
    #[error("stationary distribution invariance defect {defect:e}")]
    StationaryDefect { defect: f64 },
    #[error("policy iteration did not converge in {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("multiplier must be non-negative, got {0}")]
    NegativeMultiplier(f64),
}
