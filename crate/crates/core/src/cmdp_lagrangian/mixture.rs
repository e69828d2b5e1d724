use nalgebra::DMatrix;

use crate::aop_model::{Action, AopModel};
use crate::mdp_solver::{
    policy_transition_matrix, stationary_distribution, MdpSolver, PolicyMetrics,
    StationaryDeterministicPolicy,
};

use super::search::meets;
use super::CmdpError;

/// Per-decision biased coin between two deterministic policies: `high`
/// with probability `q`, `low` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePolicy {
    pub high: StationaryDeterministicPolicy,
    pub low: StationaryDeterministicPolicy,
    pub q: f64,
}

impl MixturePolicy {
    pub fn new(
        high: StationaryDeterministicPolicy,
        low: StationaryDeterministicPolicy,
        q: f64,
    ) -> Result<Self, CmdpError> {
        if !(0.0..=1.0).contains(&q) {
            return Err(CmdpError::InvalidProbability(q));
        }
        Ok(Self { high, low, q })
    }

    pub fn action(&self, state: usize, draw: f64) -> Action {
        mixture_action(self, state, draw)
    }
}

/// `high(s)` if `draw < q`, else `low(s)`.
pub fn mixture_action(m: &MixturePolicy, state: usize, draw: f64) -> Action {
    if draw < m.q {
        m.high.action(state)
    } else {
        m.low.action(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbedMultipliers {
    pub high: f64,
    pub low: f64,
    /// `low` was cut off at zero.
    pub clamped: bool,
}

/// `(lambda* + delta, max(0, lambda* - delta))`.
pub fn perturbed_multipliers(
    lambda_star: f64,
    delta: f64,
) -> Result<PerturbedMultipliers, CmdpError> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(CmdpError::InvalidPerturbation(delta));
    }
    if !(lambda_star.is_finite() && lambda_star >= 0.0) {
        return Err(CmdpError::InvalidMultiplier(lambda_star));
    }
    let raw_low = lambda_star - delta;
    Ok(PerturbedMultipliers {
        high: lambda_star + delta,
        low: raw_low.max(0.0),
        clamped: raw_low < 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomizationFactor {
    pub q: f64,
    /// Both durations coincide and already meet the constraint.
    pub degenerate: bool,
}

/// `q = (t_min - t_low) / (t_high - t_low)` for `t_low <= t_min <= t_high`.
pub fn randomization_factor(
    t_high: f64,
    t_low: f64,
    t_min: f64,
) -> Result<RandomizationFactor, CmdpError> {
    let violation = CmdpError::BracketViolation {
        t_high,
        t_low,
        t_min,
    };
    if !(t_high.is_finite() && t_low.is_finite() && t_min.is_finite()) {
        return Err(violation);
    }
    let scale = t_high.abs().max(t_low.abs()).max(1.0);
    if (t_high - t_low).abs() <= 1e-12 * scale {
        return if meets(t_high, t_min) {
            Ok(RandomizationFactor {
                q: 1.0,
                degenerate: true,
            })
        } else {
            Err(violation)
        };
    }
    if t_high < t_low || !meets(t_high, t_min) || !meets(t_min, t_low) {
        return Err(violation);
    }
    Ok(RandomizationFactor {
        q: ((t_min - t_low) / (t_high - t_low)).clamp(0.0, 1.0),
        degenerate: false,
    })
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub mixture: MixturePolicy,
    pub lambda_star: f64,
    pub multipliers: PerturbedMultipliers,
    pub avg_cycle_high: f64,
    pub avg_cycle_low: f64,
    pub differing_states: Vec<usize>,
    /// `q` was fixed at a boundary rather than interpolated: either both
    /// policies share one feasible duration (`q = 1`), or the low multiplier
    /// hit zero with an already feasible policy (`q = 0`).
    pub degenerate: bool,
}

impl Refinement {
    /// `q T_high + (1 - q) T_low`.
    pub fn mixed_avg_cycle(&self) -> f64 {
        let q = self.mixture.q;
        q * self.avg_cycle_high + (1.0 - q) * self.avg_cycle_low
    }
}

/// Solves at `lambda* +- delta` and mixes the two optima so the averaged
/// sampling duration sits on the constraint.
pub fn refine(
    solver: &mut MdpSolver<'_>,
    lambda_star: f64,
    delta: f64,
    warm: Option<&StationaryDeterministicPolicy>,
) -> Result<Refinement, CmdpError> {
    let multipliers = perturbed_multipliers(lambda_star, delta)?;
    let t_min = solver.model().t_min();
    let high = solver.policy_iteration(multipliers.high, warm)?.policy;
    let low = solver
        .policy_iteration(multipliers.low, Some(&high))?
        .policy;
    let t_high = solver.avg_cycle(&high)?;
    let t_low = solver.avg_cycle(&low)?;

    let scale = t_high.abs().max(t_low.abs()).max(1.0);
    let factor = if multipliers.low == 0.0
        && meets(t_low, t_min)
        && (t_high - t_low).abs() > 1e-12 * scale
    {
        // The unconstrained optimum already satisfies the constraint.
        RandomizationFactor {
            q: 0.0,
            degenerate: true,
        }
    } else {
        randomization_factor(t_high, t_low, t_min)?
    };
    let differing_states = high.differing_states(&low);
    Ok(Refinement {
        mixture: MixturePolicy::new(high, low, factor.q)?,
        lambda_star,
        multipliers,
        avg_cycle_high: t_high,
        avg_cycle_low: t_low,
        differing_states,
        degenerate: factor.degenerate,
    })
}

/// Transition matrix of the chain driven by a fresh coin at every decision.
pub fn mixture_transition_matrix(m: &MixturePolicy, model: &AopModel) -> DMatrix<f64> {
    policy_transition_matrix(&m.high, model) * m.q
        + policy_transition_matrix(&m.low, model) * (1.0 - m.q)
}

/// Long-run averages of the per-decision coin mixture.
///
/// Unlike a coin flipped once per trajectory, the per-decision mixture does
/// not in general reproduce `q T_high + (1 - q) T_low`, because the coin
/// also shifts the stationary distribution.
pub fn mixture_metrics(
    m: &MixturePolicy,
    model: &AopModel,
    lambda: f64,
) -> Result<PolicyMetrics, CmdpError> {
    let p = mixture_transition_matrix(m, model);
    let stationary = stationary_distribution(&p)?;
    let high = m.high.action_indices(model);
    let low = m.low.action_indices(model);
    let (mut relaxed, mut cycle, mut raw) = (0.0, 0.0, 0.0);
    for (i, &rho) in stationary.iter().enumerate() {
        let s = model.space().state(i);
        for (weight, a) in [(m.q, high[i]), (1.0 - m.q, low[i])] {
            let w = rho * weight;
            relaxed += w * model.relaxed_at(i, a);
            cycle += w * model.cycle_at(i, a);
            raw += w * model.raw_area_reward(&s, &model.space().action(a));
        }
    }
    Ok(PolicyMetrics {
        stationary,
        avg_lagrange: relaxed - lambda * cycle,
        avg_relaxed_aop: relaxed,
        avg_cycle: cycle,
        avg_aop_ratio_of_sums: raw / cycle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aop_model::ProcessingOrigin;

    #[test]
    fn perturbation_arithmetic() {
        let p = perturbed_multipliers(0.5, 3e-5).unwrap();
        assert!((p.high - 0.50003).abs() < 1e-15);
        assert!((p.low - 0.49997).abs() < 1e-15);
        assert!(!p.clamped);
        let p = perturbed_multipliers(0.0, 3e-5).unwrap();
        assert_eq!((p.high, p.low, p.clamped), (3e-5, 0.0, true));
        assert!(matches!(
            perturbed_multipliers(0.5, 0.0),
            Err(CmdpError::InvalidPerturbation(_))
        ));
    }

    #[test]
    fn randomization_factor_examples() {
        assert_eq!(randomization_factor(1250.0, 1150.0, 1200.0).unwrap().q, 0.5);
        assert_eq!(randomization_factor(1250.0, 1200.0, 1200.0).unwrap().q, 0.0);
        assert_eq!(
            randomization_factor(1300.0, 1100.0, 1250.0).unwrap().q,
            0.75
        );
        let d = randomization_factor(1300.0, 1300.0, 1200.0).unwrap();
        assert!(d.degenerate && d.q == 1.0);
        assert!(matches!(
            randomization_factor(1100.0, 1100.0, 1200.0),
            Err(CmdpError::BracketViolation { .. })
        ));
        assert!(matches!(
            randomization_factor(1190.0, 1100.0, 1200.0),
            Err(CmdpError::BracketViolation { .. })
        ));
    }

    #[test]
    fn mixture_action_boundaries() {
        let model = AopModel::default_scenario();
        let a = Action {
            wait_index: 0,
            next_origin: ProcessingOrigin::Edge,
        };
        let b = Action {
            wait_index: 1,
            next_origin: ProcessingOrigin::Local,
        };
        let high = StationaryDeterministicPolicy::constant(a, &model);
        let low =
            StationaryDeterministicPolicy::from_fn(&model, |i| if i == 3 { b } else { a }).unwrap();
        let always = MixturePolicy::new(high.clone(), low.clone(), 1.0).unwrap();
        let never = MixturePolicy::new(high.clone(), low.clone(), 0.0).unwrap();
        let half = MixturePolicy::new(high, low, 0.5).unwrap();
        for draw in [0.0, 0.3, 0.999_999] {
            assert_eq!(always.action(3, draw), a);
            assert_eq!(never.action(3, draw), b);
            assert_eq!(half.action(7, draw), a);
        }
        assert_eq!(half.action(3, 0.49), a);
        assert_eq!(half.action(3, 0.5), b);
        assert!(MixturePolicy::new(always.high.clone(), always.low.clone(), 1.5).is_err());
    }

    #[test]
    fn identical_policies_mix_to_themselves() {
        let model = AopModel::default_scenario();
        let p = StationaryDeterministicPolicy::constant(
            Action {
                wait_index: 1,
                next_origin: ProcessingOrigin::Local,
            },
            &model,
        );
        let m = MixturePolicy::new(p.clone(), p.clone(), 0.3).unwrap();
        let mixed = mixture_metrics(&m, &model, 0.0).unwrap();
        let pure = crate::mdp_solver::policy_metrics(&p, 0.0, &model).unwrap();
        assert!((mixed.avg_cycle - pure.avg_cycle).abs() < 1e-9);
        assert!((mixed.avg_relaxed_aop - pure.avg_relaxed_aop).abs() < 1e-9);
    }
}
