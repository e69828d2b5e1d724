//! Multiplier search for the sampling-duration constraint and the
//! two-policy randomized mixture built around the found multiplier.

mod mixture;
mod search;

pub use mixture::{
    mixture_action, mixture_metrics, mixture_transition_matrix, perturbed_multipliers,
    randomization_factor, refine, MixturePolicy, PerturbedMultipliers, RandomizationFactor,
    Refinement,
};
pub use search::{
    bracket_multiplier, robbins_monro, solve_cmdp, write_lambda_trace, CmdpOptions, CmdpSolution,
    LambdaIterate, LambdaTrace, StepRule,
};

use crate::mdp_solver::SolverError;

#[derive(Debug, thiserror::Error)]
pub enum CmdpError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("perturbation must be positive and finite, got {0}")]
    InvalidPerturbation(f64),
    #[error("multiplier must be non-negative and finite, got {0}")]
    InvalidMultiplier(f64),
    #[error("step scale must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error(
        "sampling durations {t_high} (high) and {t_low} (low) ms do not bracket {t_min} ms; \
         increase the perturbation or rerun the multiplier search"
    )]
    BracketViolation { t_high: f64, t_low: f64, t_min: f64 },
    #[error(
        "no policy reaches an average sampling duration of {t_min} ms (largest found {best} ms)"
    )]
    Infeasible { t_min: f64, best: f64 },
    #[error("mixture probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("trace output: {0}")]
    Io(String),
}
