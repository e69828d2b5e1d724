use nalgebra::{DMatrix, DVector};

use crate::aop_model::AopModel;

use super::stationary::{class_stationary, recurrent_classes};
use super::{SolverError, StationaryDeterministicPolicy};

/// Scaled residual above which an evaluation is reported as failed.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Gain, bias and auxiliary vectors of one policy at one multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct GainBiasSolution {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub aux: Vec<f64>,
    /// Max absolute defect of the stacked equations.
    pub residual: f64,
}

impl GainBiasSolution {
    pub fn mean_gain(&self) -> f64 {
        self.gain.iter().sum::<f64>() / self.gain.len() as f64
    }

    /// `max(gain) - min(gain)`.
    pub fn gain_spread(&self) -> f64 {
        let (lo, hi) = self
            .gain
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &g| {
                (lo.min(g), hi.max(g))
            });
        hi - lo
    }
}

/// `P_pi` as a dense matrix.
pub fn policy_transition_matrix(
    policy: &StationaryDeterministicPolicy,
    model: &AopModel,
) -> DMatrix<f64> {
    let n = model.num_states();
    let mut p = DMatrix::zeros(n, n);
    for (i, &a) in policy.action_indices(model).iter().enumerate() {
        for &(j, prob) in model.successors(i, a) {
            p[(i, j)] += prob;
        }
    }
    p
}

/// Solution of the stacked evaluation system
/// `[[I-P, 0, 0], [I, I-P, 0], [0, I, I-P]] (g, b, mu) = (0, r, 0)`
/// for a reward that is affine in
/// the multiplier, `r(lambda) = relaxed - lambda * cycle`.
///
/// The minimum-norm solution is linear in the right-hand side, so the two
/// reward components are solved once and combined per multiplier.
#[derive(Debug, Clone)]
pub struct EvaluationBasis {
    n: usize,
    relaxed: DVector<f64>,
    cycle: DVector<f64>,
    defect_relaxed: DVector<f64>,
    defect_cycle: DVector<f64>,
    rhs_relaxed_norm: f64,
    rhs_cycle_norm: f64,
    matrix_norm: f64,
}

impl EvaluationBasis {
    pub fn new(
        policy: &StationaryDeterministicPolicy,
        model: &AopModel,
    ) -> Result<Self, SolverError> {
        let p = policy_transition_matrix(policy, model);
        let actions = policy.action_indices(model);
        let relaxed: Vec<f64> = actions
            .iter()
            .enumerate()
            .map(|(i, &a)| model.relaxed_at(i, a))
            .collect();
        let cycle: Vec<f64> = actions
            .iter()
            .enumerate()
            .map(|(i, &a)| model.cycle_at(i, a))
            .collect();
        Self::from_chain(&p, &relaxed, &cycle)
    }

    /// Solves for an arbitrary square transition matrix and the two reward
    /// components.
    pub fn from_chain(
        p: &DMatrix<f64>,
        relaxed: &[f64],
        cycle: &[f64],
    ) -> Result<Self, SolverError> {
        let n = p.nrows();
        assert_eq!(p.ncols(), n, "transition matrix must be square");
        assert_eq!(relaxed.len(), n);
        assert_eq!(cycle.len(), n);

        let mut rewards = DMatrix::zeros(n, 2);
        rewards.set_column(0, &DVector::from_column_slice(relaxed));
        rewards.set_column(1, &DVector::from_column_slice(cycle));

        // g = P* r is the only gain, b = D r the only bias with P* b = 0
        // (which the third block requires), and every auxiliary vector is
        // -D b plus a kernel element of I - P. D = Z (I - P*) with
        // Z = (I - P + P*)^-1 is the deviation matrix.
        let classes = recurrent_classes(p);
        let kernel = kernel_basis(p, &classes)?;
        let mut weights = DMatrix::zeros(classes.len(), n);
        for (c, class) in classes.iter().enumerate() {
            for (&j, mass) in class.iter().zip(class_stationary(p, class)?) {
                weights[(c, j)] = mass;
            }
        }
        let limiting = &kernel * &weights;
        let eye = DMatrix::<f64>::identity(n, n);
        let i_minus_p = &eye - p;
        let fundamental = (&i_minus_p + &limiting).lu();
        let deviation = |v: &DMatrix<f64>| -> Result<DMatrix<f64>, SolverError> {
            fundamental
                .solve(&(v - &limiting * v))
                .ok_or(SolverError::RankDeficient)
        };
        let gain = &limiting * &rewards;
        let bias = deviation(&rewards)?;
        let mut aux = -deviation(&bias)?;

        // Minimum norm: drop the component along the kernel.
        let gram = (kernel.transpose() * &kernel)
            .cholesky()
            .ok_or(SolverError::RankDeficient)?;
        aux -= &kernel * gram.solve(&(kernel.transpose() * &aux));

        let defect_top = &i_minus_p * &gain;
        let defect_mid = &gain + &i_minus_p * &bias - &rewards;
        let defect_bottom = &bias + &i_minus_p * &aux;
        let stack = |a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, col: usize| {
            DVector::from_iterator(
                3 * n,
                a.column(col)
                    .iter()
                    .chain(b.column(col).iter())
                    .chain(c.column(col).iter())
                    .copied(),
            )
        };
        let row_sum = i_minus_p
            .row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        Ok(Self {
            n,
            relaxed: stack(&gain, &bias, &aux, 0),
            cycle: stack(&gain, &bias, &aux, 1),
            defect_relaxed: stack(&defect_top, &defect_mid, &defect_bottom, 0),
            defect_cycle: stack(&defect_top, &defect_mid, &defect_bottom, 1),
            rhs_relaxed_norm: rewards.column(0).amax(),
            rhs_cycle_norm: rewards.column(1).amax(),
            matrix_norm: 1.0 + row_sum,
        })
    }

    /// Gain, bias and auxiliary vectors for `relaxed - lambda * cycle`.
    pub fn at(&self, lambda: f64) -> Result<GainBiasSolution, SolverError> {
        let x = &self.relaxed - &self.cycle * lambda;
        let defect = (&self.defect_relaxed - &self.defect_cycle * lambda).amax();
        let scale =
            self.matrix_norm * x.amax() + self.rhs_relaxed_norm + lambda * self.rhs_cycle_norm;
        if !defect.is_finite() || defect > RESIDUAL_TOL * scale.max(1.0) {
            return Err(SolverError::EvaluationFailed {
                residual: defect,
                scale,
            });
        }
        let n = self.n;
        Ok(GainBiasSolution {
            gain: x.rows(0, n).iter().copied().collect(),
            bias: x.rows(n, n).iter().copied().collect(),
            aux: x.rows(2 * n, n).iter().copied().collect(),
            residual: defect,
        })
    }
}

/// Columns span the kernel of `I - P`: column `c` is the probability of
/// ending in closed class `c`.
fn kernel_basis(p: &DMatrix<f64>, classes: &[Vec<usize>]) -> Result<DMatrix<f64>, SolverError> {
    let n = p.nrows();
    let mut recurrent = vec![None; n];
    for (c, class) in classes.iter().enumerate() {
        for &i in class {
            recurrent[i] = Some(c);
        }
    }
    let transient: Vec<usize> = (0..n).filter(|&i| recurrent[i].is_none()).collect();
    let mut v = DMatrix::zeros(n, classes.len());
    for (i, c) in recurrent.iter().enumerate() {
        if let Some(c) = c {
            v[(i, *c)] = 1.0;
        }
    }
    if transient.is_empty() {
        return Ok(v);
    }
    // (I - P_TT) v_T = P_TC 1_C for every class at once.
    let t = transient.len();
    let mut a = DMatrix::<f64>::identity(t, t);
    let mut b = DMatrix::zeros(t, classes.len());
    for (r, &i) in transient.iter().enumerate() {
        for (col, &j) in transient.iter().enumerate() {
            a[(r, col)] -= p[(i, j)];
        }
        for j in 0..n {
            if let Some(c) = recurrent[j] {
                b[(r, c)] += p[(i, j)];
            }
        }
    }
    let sol = a.lu().solve(&b).ok_or(SolverError::RankDeficient)?;
    for (r, &i) in transient.iter().enumerate() {
        for c in 0..classes.len() {
            v[(i, c)] = sol[(r, c)];
        }
    }
    Ok(v)
}

/// Solves the gain/bias/auxiliary equations of `policy` at `lambda`.
pub fn evaluate_policy(
    policy: &StationaryDeterministicPolicy,
    lambda: f64,
    model: &AopModel,
) -> Result<GainBiasSolution, SolverError> {
    EvaluationBasis::new(policy, model)?.at(lambda)
}

/// Evaluates a bare chain with a single reward vector.
pub fn evaluate_chain(p: &DMatrix<f64>, reward: &[f64]) -> Result<GainBiasSolution, SolverError> {
    let zeros = vec![0.0; reward.len()];
    EvaluationBasis::from_chain(p, reward, &zeros)?.at(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `[[I-P, 0, 0], [I, I-P, 0], [0, I, I-P]]`.
    pub(super) fn stacked_matrix(p: &DMatrix<f64>) -> DMatrix<f64> {
        let n = p.nrows();
        let eye = DMatrix::<f64>::identity(n, n);
        let i_minus_p = &eye - p;
        let mut m = DMatrix::zeros(3 * n, 3 * n);
        for block in 0..3 {
            m.view_mut((block * n, block * n), (n, n))
                .copy_from(&i_minus_p);
        }
        m.view_mut((n, 0), (n, n)).copy_from(&eye);
        m.view_mut((2 * n, n), (n, n)).copy_from(&eye);
        m
    }

    fn infinity_norm(m: &DMatrix<f64>) -> f64 {
        m.row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Dense reference: pin the auxiliary sum on each closed class, solve
    /// the stacked system by Householder QR, then project off the kernel.
    fn dense_reference(p: &DMatrix<f64>, reward: &[f64]) -> DVector<f64> {
        let n = p.nrows();
        let m = stacked_matrix(p);
        let classes = recurrent_classes(p);
        let k = classes.len();
        let mut aug = DMatrix::zeros(3 * n + k, 3 * n);
        aug.view_mut((0, 0), (3 * n, 3 * n)).copy_from(&m);
        for (c, class) in classes.iter().enumerate() {
            for &i in class {
                aug[(3 * n + c, 2 * n + i)] = 1.0;
            }
        }
        let mut rhs = DVector::zeros(3 * n + k);
        rhs.rows_mut(n, n)
            .copy_from(&DVector::from_column_slice(reward));
        let qr = aug.qr();
        let mut x = qr
            .r()
            .solve_upper_triangular(&(qr.q().transpose() * &rhs))
            .unwrap();
        let kernel = kernel_basis(p, &classes).unwrap();
        let mu = x.rows(2 * n, n).into_owned();
        let gram = (kernel.transpose() * &kernel).cholesky().unwrap();
        let projected = &mu - &kernel * gram.solve(&(kernel.transpose() * &mu));
        x.rows_mut(2 * n, n).copy_from(&projected);
        assert!(
            (&m * &x - rhs.rows(0, 3 * n)).amax() < 1e-8 * (1.0 + infinity_norm(&m) * x.amax())
        );
        x
    }

    fn random_chain(n: usize, density: &[f64]) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let v = density[i * n + j];
                p[(i, j)] = if v < 0.5 { 0.0 } else { v };
            }
            // keep every row stochastic
            p[(i, (i + 1) % n)] += 0.1;
            let s = p.row(i).sum();
            for j in 0..n {
                p[(i, j)] /= s;
            }
        }
        p
    }

    proptest! {
        #[test]
        fn matches_dense_stacked_solve(
            n in 2usize..9,
            density in proptest::collection::vec(0.0f64..1.0, 64),
            reward in proptest::collection::vec(-50.0f64..50.0, 8),
            absorbing in proptest::collection::vec(any::<bool>(), 8),
        ) {
            let mut p = random_chain(n, &density);
            for i in 0..n {
                if absorbing[i] {
                    p.row_mut(i).fill(0.0);
                    p[(i, i)] = 1.0;
                }
            }
            let r = &reward[..n];
            let fast = evaluate_chain(&p, r).unwrap();
            let dense = dense_reference(&p, r);
            for (block, fast) in [&fast.gain, &fast.bias, &fast.aux].into_iter().enumerate() {
                let dense = dense.rows(block * n, n);
                let tol = 1e-9 * (1.0 + dense.amax());
                for i in 0..n {
                    prop_assert!((fast[i] - dense[i]).abs() < tol, "block {} state {}: {} vs {}", block, i, fast[i], dense[i]);
                }
            }
        }
    }

    #[test]
    fn default_scenario_matches_dense_solve() {
        let model = AopModel::default_scenario();
        let policy =
            StationaryDeterministicPolicy::from_fn(&model, |i| model.space().action((i * 7) % 10))
                .unwrap();
        let p = policy_transition_matrix(&policy, &model);
        let actions = policy.action_indices(&model);
        let r: Vec<f64> = (0..model.num_states())
            .map(|i| model.lagrange_at(i, actions[i], 0.4))
            .collect();
        let fast = evaluate_chain(&p, &r).unwrap();
        let dense = dense_reference(&p, &r);
        let n = model.num_states();
        let tol = 1e-9 * (1.0 + dense.amax());
        for i in 0..n {
            assert!((fast.gain[i] - dense[i]).abs() < tol);
            assert!((fast.bias[i] - dense[n + i]).abs() < tol);
            assert!((fast.aux[i] - dense[2 * n + i]).abs() < tol);
        }
    }

    #[test]
    fn single_state_self_loop() {
        let p = DMatrix::from_element(1, 1, 1.0);
        let sol = evaluate_chain(&p, &[7.5]).unwrap();
        assert!((sol.gain[0] - 7.5).abs() < 1e-12);
        assert!(sol.bias[0].abs() < 1e-12);
    }

    #[test]
    fn two_state_cycle() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let sol = evaluate_chain(&p, &[3.0, 11.0]).unwrap();
        for g in &sol.gain {
            assert!((g - 7.0).abs() < 1e-12);
        }
        // b is pinned by the third equation: stationary-weighted mean zero.
        // b_0 - b_1 = r_0 - g and b_0 + b_1 = 0
        assert!((sol.bias[0] + 2.0).abs() < 1e-12);
        assert!((sol.bias[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn multichain_gains_are_per_class() {
        // two absorbing states
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let sol = evaluate_chain(&p, &[1.0, 5.0]).unwrap();
        assert!((sol.gain[0] - 1.0).abs() < 1e-12);
        assert!((sol.gain[1] - 5.0).abs() < 1e-12);
        assert!((sol.gain_spread() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn broken_matrix_is_reported() {
        // Not stochastic: (I-P) g = 0 forces g_1 = 0 while the second block
        // demands g_1 = r_1.
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let err = evaluate_chain(&p, &[1.0, 2.0]).unwrap_err();
        assert!(matches!(
            err,
            SolverError::EvaluationFailed { .. } | SolverError::RankDeficient
        ));
        // Same Jordan block with both states pinned: full rank, inconsistent.
        let p = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 1.0]);
        let err = evaluate_chain(&p, &[1.0, 2.0]).unwrap_err();
        assert!(
            matches!(err, SolverError::EvaluationFailed { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn auxiliary_vector_is_minimum_norm() {
        // Unichain with a transient state: the kernel is the constant vector,
        // so the minimum-norm auxiliary vector sums to zero.
        let p = DMatrix::from_row_slice(3, 3, &[0.0, 0.5, 0.5, 0.0, 0.1, 0.9, 0.0, 0.6, 0.4]);
        let sol = evaluate_chain(&p, &[3.0, 1.0, 4.0]).unwrap();
        assert!(sol.aux.iter().sum::<f64>().abs() < 1e-10);
        // Two closed classes and a transient state splitting 0.25 / 0.75.
        let p = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.25, 0.0, 0.75, 0.0, 0.0, 1.0]);
        let sol = evaluate_chain(&p, &[2.0, 5.0, 6.0]).unwrap();
        assert!((sol.gain[1] - (0.25 * 2.0 + 0.75 * 6.0)).abs() < 1e-12);
        for v in [[1.0, 0.25, 0.0], [0.0, 0.75, 1.0]] {
            let dot: f64 = v.iter().zip(&sol.aux).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-10);
        }
    }

    #[test]
    fn basis_is_linear_in_lambda() {
        let p = DMatrix::from_row_slice(3, 3, &[0.2, 0.8, 0.0, 0.0, 0.5, 0.5, 0.6, 0.0, 0.4]);
        let relaxed = [4.0, 9.0, 1.0];
        let cycle = [2.0, 3.0, 5.0];
        let basis = EvaluationBasis::from_chain(&p, &relaxed, &cycle).unwrap();
        let lambda = 0.7;
        let combined: Vec<f64> = relaxed
            .iter()
            .zip(&cycle)
            .map(|(r, c)| r - lambda * c)
            .collect();
        let direct = evaluate_chain(&p, &combined).unwrap();
        let via = basis.at(lambda).unwrap();
        for i in 0..3 {
            assert!((direct.gain[i] - via.gain[i]).abs() < 1e-10);
            assert!((direct.bias[i] - via.bias[i]).abs() < 1e-10);
        }
    }
}
