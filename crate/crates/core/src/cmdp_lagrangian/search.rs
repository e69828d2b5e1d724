use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;

use crate::aop_model::AopModel;
use crate::mdp_solver::{MdpSolver, PolicyMetrics, StationaryDeterministicPolicy};

use super::mixture::{refine, Refinement};
use super::CmdpError;

/// Relative slack used when deciding whether an average sampling duration
/// meets the constraint.
pub(crate) const FEASIBILITY_TOL: f64 = 1e-9;

pub(crate) fn meets(t: f64, t_min: f64) -> bool {
    t >= t_min - FEASIBILITY_TOL * t_min.abs().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// `1 / k`
    Harmonic,
    /// `eps / k`
    Scaled(f64),
}

impl StepRule {
    pub fn step(&self, k: usize) -> f64 {
        match *self {
            StepRule::Harmonic => 1.0 / k as f64,
            StepRule::Scaled(eps) => eps / k as f64,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StepRule::Harmonic => "harmonic",
            StepRule::Scaled(_) => "scaled",
        }
    }

    fn validate(&self) -> Result<(), CmdpError> {
        match *self {
            StepRule::Scaled(eps) if !(eps.is_finite() && eps > 0.0) => {
                Err(CmdpError::InvalidStep(eps))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for StepRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepRule::Harmonic => f.write_str("harmonic"),
            StepRule::Scaled(eps) => write!(f, "scaled({eps})"),
        }
    }
}

/// Parses `harmonic`, `scaled` (scale 1e-3) or `scaled:<eps>`.
impl FromStr for StepRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.split_once(':') {
            None if lower == "harmonic" => Ok(StepRule::Harmonic),
            None if lower == "scaled" => Ok(StepRule::Scaled(1e-3)),
            Some(("scaled", eps)) => eps
                .parse::<f64>()
                .ok()
                .filter(|e| e.is_finite() && *e > 0.0)
                .map(StepRule::Scaled)
                .ok_or_else(|| format!("invalid step scale '{eps}'")),
            _ => Err(format!(
                "unknown step rule '{s}' (expected harmonic or scaled[:eps])"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaIterate {
    #[serde(rename = "iteration")]
    pub k: usize,
    pub lambda: f64,
    #[serde(rename = "avg_cycle_ms")]
    pub avg_cycle: f64,
}

#[derive(Debug, Clone)]
pub struct LambdaTrace {
    pub rule: StepRule,
    pub iterates: Vec<LambdaIterate>,
    pub converged: bool,
    /// Last update's output, or the last iterate when the cap was hit.
    pub final_lambda: f64,
    /// Inner optimum at the last iterate.
    pub final_policy: StationaryDeterministicPolicy,
}

impl LambdaTrace {
    pub fn iterations(&self) -> usize {
        self.iterates.len()
    }
}

/// `lambda <- max(0, lambda + step_k (T_min - T(pi^lambda)))` with exact
/// inner solves, each warm-started from the previous optimum.
pub fn robbins_monro(
    solver: &mut MdpSolver<'_>,
    rule: StepRule,
    lambda0: f64,
    stop_tol: f64,
    max_iters: usize,
) -> Result<LambdaTrace, CmdpError> {
    rule.validate()?;
    if !(lambda0.is_finite() && lambda0 >= 0.0) {
        return Err(CmdpError::InvalidMultiplier(lambda0));
    }
    let t_min = solver.model().t_min();
    let mut lambda = lambda0;
    let mut policy: Option<StationaryDeterministicPolicy> = None;
    let mut iterates = Vec::new();
    for k in 1..=max_iters.max(1) {
        let out = solver.policy_iteration(lambda, policy.as_ref())?;
        let t = solver.avg_cycle(&out.policy)?;
        policy = Some(out.policy);
        iterates.push(LambdaIterate {
            k,
            lambda,
            avg_cycle: t,
        });
        let next = (lambda + rule.step(k) * (t_min - t)).max(0.0);
        if (next - lambda).abs() <= stop_tol {
            return Ok(LambdaTrace {
                rule,
                iterates,
                converged: true,
                final_lambda: next,
                final_policy: policy.expect("set above"),
            });
        }
        if k == max_iters.max(1) {
            break;
        }
        lambda = next;
    }
    Ok(LambdaTrace {
        rule,
        iterates,
        converged: false,
        final_lambda: lambda,
        final_policy: policy.expect("at least one iterate"),
    })
}

/// CSV with header `iteration,lambda,avg_cycle_ms`.
pub fn write_lambda_trace<W: Write>(writer: W, trace: &LambdaTrace) -> Result<(), CmdpError> {
    let mut w = csv::Writer::from_writer(writer);
    for it in &trace.iterates {
        w.serialize(it).map_err(|e| CmdpError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| CmdpError::Io(e.to_string()))
}

/// Smallest multiplier, up to `delta`, whose optimal policy meets the
/// sampling constraint.
///
/// The average sampling duration of the optimal policy is non-decreasing in
/// the multiplier, so starting near `lambda_start` the search widens a
/// window until it straddles the constraint and then bisects it down to
/// width `delta`. Returns the upper end, or 0 when the unconstrained optimum
/// is already feasible.
pub fn bracket_multiplier(
    solver: &mut MdpSolver<'_>,
    lambda_start: f64,
    delta: f64,
) -> Result<f64, CmdpError> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(CmdpError::InvalidPerturbation(delta));
    }
    if !(lambda_start.is_finite() && lambda_start >= 0.0) {
        return Err(CmdpError::InvalidMultiplier(lambda_start));
    }
    let t_min = solver.model().t_min();
    let mut warm: Option<StationaryDeterministicPolicy> = None;
    let mut feasible =
        |solver: &mut MdpSolver<'_>, lambda: f64| -> Result<(bool, f64), CmdpError> {
            let out = solver.policy_iteration(lambda, warm.as_ref())?;
            let t = solver.avg_cycle(&out.policy)?;
            warm = Some(out.policy);
            Ok((meets(t, t_min), t))
        };

    if feasible(solver, 0.0)?.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi);
    if feasible(solver, lambda_start)?.0 {
        hi = lambda_start;
        let mut step = delta;
        loop {
            let candidate = (lambda_start - step).max(0.0);
            if !feasible(solver, candidate)?.0 {
                lo = candidate;
                break;
            }
            hi = candidate;
            step *= 2.0;
        }
    } else {
        lo = lambda_start;
        let mut step = delta;
        let mut best = f64::NEG_INFINITY;
        loop {
            let candidate = lambda_start + step;
            let (ok, t) = feasible(solver, candidate)?;
            best = best.max(t);
            if ok {
                hi = candidate;
                break;
            }
            lo = candidate;
            step *= 2.0;
            if !candidate.is_finite() || step > 1e12 {
                return Err(CmdpError::Infeasible { t_min, best });
            }
        }
    }
    while hi - lo > delta {
        let mid = 0.5 * (lo + hi);
        if feasible(solver, mid)?.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy)]
pub struct CmdpOptions {
    pub step_rule: StepRule,
    pub lambda0: f64,
    pub stop_tol: f64,
    pub max_iters: usize,
    pub perturbation: f64,
}

impl CmdpOptions {
    /// Scaled rule with the configured step factor, starting from zero.
    pub fn from_model(model: &AopModel) -> Self {
        let cfg = model.config();
        Self {
            step_rule: StepRule::Scaled(cfg.step_factor),
            lambda0: 0.0,
            stop_tol: cfg.stop_tol,
            max_iters: cfg.max_outer_iters,
            perturbation: cfg.perturbation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CmdpSolution {
    pub trace: LambdaTrace,
    /// Multiplier after bracketing the search output to within the
    /// perturbation.
    pub lambda_star: f64,
    pub policy_star: StationaryDeterministicPolicy,
    pub metrics_star: PolicyMetrics,
    pub refinement: Refinement,
}

/// Multiplier search, bracketing and mixture refinement in one call.
pub fn solve_cmdp(
    solver: &mut MdpSolver<'_>,
    options: &CmdpOptions,
) -> Result<CmdpSolution, CmdpError> {
    let trace = robbins_monro(
        solver,
        options.step_rule,
        options.lambda0,
        options.stop_tol,
        options.max_iters,
    )?;
    let lambda_star = bracket_multiplier(solver, trace.final_lambda, options.perturbation)?;
    let star = solver.policy_iteration(lambda_star, Some(&trace.final_policy))?;
    let metrics_star = solver.metrics(&star.policy, lambda_star)?;
    let refinement = refine(
        solver,
        lambda_star,
        options.perturbation,
        Some(&star.policy),
    )?;
    Ok(CmdpSolution {
        trace,
        lambda_star,
        policy_star: star.policy,
        metrics_star,
        refinement,
    })
}
