use std::collections::HashMap;
use std::sync::Arc;

use crate::aop_model::{Action, AopModel, ProcessingOrigin};

use super::evaluation::{policy_transition_matrix, EvaluationBasis, GainBiasSolution};
use super::stationary::stationary_distribution;
use super::{SolverError, StationaryDeterministicPolicy};

/// Policy iteration gives up after this many evaluate/improve rounds.
pub const MAX_POLICY_ITERATIONS: usize = 200;

/// Relative slack within which the incumbent action counts as a minimizer.
pub const IMPROVEMENT_TOL: f64 = 1e-10;

/// Long-run averages of a unichain policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMetrics {
    pub stationary: Vec<f64>,
    /// Average Lagrange reward, ms.
    pub avg_lagrange: f64,
    /// Mean of per-update relaxed rewards, ms.
    pub avg_relaxed_aop: f64,
    /// Mean sampling interval, ms.
    pub avg_cycle: f64,
    /// Ratio of expected interval area to expected interval length, ms.
    pub avg_aop_ratio_of_sums: f64,
}

#[derive(Debug, Clone)]
pub struct PolicyIterationOutcome {
    pub policy: StationaryDeterministicPolicy,
    pub solution: GainBiasSolution,
    /// Number of evaluations performed.
    pub iterations: usize,
    /// Mean gain of each evaluated policy, in order.
    pub gain_history: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Averages {
    stationary: Vec<f64>,
    relaxed: f64,
    cycle: f64,
    raw: f64,
}

/// Policy evaluation and iteration over one model.
///
/// Keeps the factorized evaluation and stationary averages of every policy
/// it has seen, so sweeping the multiplier only pays for new policies.
pub struct MdpSolver<'m> {
    model: &'m AopModel,
    bases: HashMap<StationaryDeterministicPolicy, Arc<EvaluationBasis>>,
    averages: HashMap<StationaryDeterministicPolicy, Arc<Averages>>,
}

impl<'m> MdpSolver<'m> {
    pub fn new(model: &'m AopModel) -> Self {
        Self {
            model,
            bases: HashMap::new(),
            averages: HashMap::new(),
        }
    }

    pub fn model(&self) -> &'m AopModel {
        self.model
    }

    /// Number of distinct policies factorized so far.
    pub fn cached_policies(&self) -> usize {
        self.bases.len()
    }

    fn basis(
        &mut self,
        policy: &StationaryDeterministicPolicy,
    ) -> Result<Arc<EvaluationBasis>, SolverError> {
        if let Some(b) = self.bases.get(policy) {
            return Ok(Arc::clone(b));
        }
        let basis = Arc::new(EvaluationBasis::new(policy, self.model)?);
        self.bases.insert(policy.clone(), Arc::clone(&basis));
        Ok(basis)
    }

    pub fn evaluate(
        &mut self,
        policy: &StationaryDeterministicPolicy,
        lambda: f64,
    ) -> Result<GainBiasSolution, SolverError> {
        self.basis(policy)?.at(lambda)
    }

    pub fn policy_iteration(
        &mut self,
        lambda: f64,
        initial: Option<&StationaryDeterministicPolicy>,
    ) -> Result<PolicyIterationOutcome, SolverError> {
        if lambda.is_nan() || lambda < 0.0 {
            return Err(SolverError::NegativeMultiplier(lambda));
        }
        let mut policy = match initial {
            Some(p) => p.clone(),
            None => default_initial_policy(self.model),
        };
        let mut gain_history = Vec::new();
        for iteration in 1..=MAX_POLICY_ITERATIONS {
            let solution = self.evaluate(&policy, lambda)?;
            gain_history.push(solution.mean_gain());
            let next = improve_policy(&policy, &solution, self.model, lambda);
            if next == policy {
                return Ok(PolicyIterationOutcome {
                    policy,
                    solution,
                    iterations: iteration,
                    gain_history,
                });
            }
            policy = next;
        }
        Err(SolverError::NoConvergence {
            iterations: MAX_POLICY_ITERATIONS,
        })
    }

    fn averages(
        &mut self,
        policy: &StationaryDeterministicPolicy,
    ) -> Result<Arc<Averages>, SolverError> {
        if let Some(a) = self.averages.get(policy) {
            return Ok(Arc::clone(a));
        }
        let model = self.model;
        let p = policy_transition_matrix(policy, model);
        let stationary = stationary_distribution(&p)?;
        let actions = policy.action_indices(model);
        let (mut relaxed, mut cycle, mut raw) = (0.0, 0.0, 0.0);
        for (i, (&rho, &a)) in stationary.iter().zip(&actions).enumerate() {
            let r = model.relaxed_at(i, a);
            let c = model.cycle_at(i, a);
            relaxed += rho * r;
            cycle += rho * c;
            raw += rho * model.raw_area_reward(&model.space().state(i), &model.space().action(a));
        }
        let averages = Arc::new(Averages {
            stationary,
            relaxed,
            cycle,
            raw,
        });
        self.averages.insert(policy.clone(), Arc::clone(&averages));
        Ok(averages)
    }

    pub fn metrics(
        &mut self,
        policy: &StationaryDeterministicPolicy,
        lambda: f64,
    ) -> Result<PolicyMetrics, SolverError> {
        let avg = self.averages(policy)?;
        Ok(PolicyMetrics {
            stationary: avg.stationary.clone(),
            avg_lagrange: avg.relaxed - lambda * avg.cycle,
            avg_relaxed_aop: avg.relaxed,
            avg_cycle: avg.cycle,
            avg_aop_ratio_of_sums: avg.raw / avg.cycle,
        })
    }

    /// Mean sampling interval only; skips copying the stationary vector.
    pub fn avg_cycle(
        &mut self,
        policy: &StationaryDeterministicPolicy,
    ) -> Result<f64, SolverError> {
        Ok(self.averages(policy)?.cycle)
    }
}

/// Zero wait, offload everything.
pub fn default_initial_policy(model: &AopModel) -> StationaryDeterministicPolicy {
    StationaryDeterministicPolicy::constant(
        Action {
            wait_index: 0,
            next_origin: ProcessingOrigin::Edge,
        },
        model,
    )
}

/// `r(s, a) + sum_s' P(s'|s, a) b(s')` for every action at `state`.
fn action_values<'a>(
    model: &'a AopModel,
    state: usize,
    bias: &'a [f64],
    lambda: f64,
) -> impl Iterator<Item = f64> + 'a {
    (0..model.num_actions()).map(move |a| {
        model.lagrange_at(state, a, lambda)
            + model
                .successors(state, a)
                .iter()
                .map(|&(j, p)| p * bias[j])
                .sum::<f64>()
    })
}

/// One improvement step. Keeps the incumbent action wherever it is still
/// a minimizer, otherwise takes the smallest `(wait_index, origin)`
/// minimizer.
pub fn improve_policy(
    policy: &StationaryDeterministicPolicy,
    solution: &GainBiasSolution,
    model: &AopModel,
    lambda: f64,
) -> StationaryDeterministicPolicy {
    let incumbent = policy.action_indices(model);
    let actions = (0..model.num_states())
        .map(|s| {
            let values: Vec<f64> = action_values(model, s, &solution.bias, lambda).collect();
            let best = values.iter().copied().fold(f64::INFINITY, f64::min);
            let slack = IMPROVEMENT_TOL * (1.0 + best.abs());
            let chosen = if values[incumbent[s]] <= best + slack {
                incumbent[s]
            } else {
                values
                    .iter()
                    .position(|&v| v <= best + slack)
                    .expect("minimum is attained")
            };
            model.space().action(chosen)
        })
        .collect();
    StationaryDeterministicPolicy::new(actions, model).expect("actions come from the model")
}

/// `max_s |min_a [r(s,a) + P b] - (g(s) + b(s))|`.
pub fn bellman_residual(model: &AopModel, solution: &GainBiasSolution, lambda: f64) -> f64 {
    (0..model.num_states())
        .map(|s| {
            let best =
                action_values(model, s, &solution.bias, lambda).fold(f64::INFINITY, f64::min);
            (best - solution.gain[s] - solution.bias[s]).abs()
        })
        .fold(0.0, f64::max)
}

/// Runs policy iteration at `lambda` from `initial` (zero-wait offloading
/// when `None`).
pub fn policy_iteration(
    lambda: f64,
    model: &AopModel,
    initial: Option<&StationaryDeterministicPolicy>,
) -> Result<PolicyIterationOutcome, SolverError> {
    MdpSolver::new(model).policy_iteration(lambda, initial)
}

pub fn policy_metrics(
    policy: &StationaryDeterministicPolicy,
    lambda: f64,
    model: &AopModel,
) -> Result<PolicyMetrics, SolverError> {
    MdpSolver::new(model).metrics(policy, lambda)
}
