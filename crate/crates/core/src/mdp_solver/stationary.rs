use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use super::SolverError;

const INVARIANCE_TOL: f64 = 1e-10;

/// Closed communicating classes of the chain's support graph, each sorted.
pub fn recurrent_classes(p: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = p.nrows();
    let mut graph = DiGraph::<(), ()>::with_capacity(n, n * 3);
    let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
    for i in 0..n {
        for j in 0..n {
            if p[(i, j)] > 0.0 {
                graph.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let mut component = vec![0usize; n];
    let sccs = tarjan_scc(&graph);
    for (c, scc) in sccs.iter().enumerate() {
        for node in scc {
            component[node.index()] = c;
        }
    }
    let mut classes: Vec<Vec<usize>> = sccs
        .iter()
        .enumerate()
        .filter(|(c, scc)| {
            scc.iter().all(|node| {
                let i = node.index();
                (0..n).all(|j| p[(i, j)] <= 0.0 || component[j] == *c)
            })
        })
        .map(|(_, scc)| {
            let mut members: Vec<usize> = scc.iter().map(|n| n.index()).collect();
            members.sort_unstable();
            members
        })
        .collect();
    classes.sort();
    classes
}

/// Invariant distribution of a unichain transition matrix. Transient states
/// get exactly zero mass.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<Vec<f64>, SolverError> {
    let n = p.nrows();
    let classes = recurrent_classes(p);
    if classes.len() != 1 {
        return Err(SolverError::NotUnichain { classes });
    }
    let mut rho = vec![0.0; n];
    for (&i, mass) in classes[0].iter().zip(class_stationary(p, &classes[0])?) {
        rho[i] = mass;
    }
    let defect = invariance_defect(p, &rho);
    if defect.is_nan() || defect > INVARIANCE_TOL {
        return Err(SolverError::StationaryDefect { defect });
    }
    Ok(rho)
}

/// Invariant distribution of the chain restricted to one closed class, in
/// the order of `class`.
pub(crate) fn class_stationary(p: &DMatrix<f64>, class: &[usize]) -> Result<Vec<f64>, SolverError> {
    let k = class.len();
    // rho_C (I - P_CC) = 0 with the last equation replaced by sum(rho) = 1.
    let mut a = DMatrix::<f64>::zeros(k, k);
    for (r, &i) in class.iter().enumerate() {
        for (c, &j) in class.iter().enumerate() {
            let identity = if r == c { 1.0 } else { 0.0 };
            a[(c, r)] = identity - p[(i, j)];
        }
    }
    for c in 0..k {
        a[(k - 1, c)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(k);
    rhs[k - 1] = 1.0;
    let solved = a
        .lu()
        .solve(&rhs)
        .ok_or(SolverError::SingularStationarySystem)?;
    Ok(solved.iter().map(|v| v.max(0.0)).collect())
}

/// `max_j |(rho P)_j - rho_j|`.
pub fn invariance_defect(p: &DMatrix<f64>, rho: &[f64]) -> f64 {
    let r = DVector::from_column_slice(rho);
    let moved = p.transpose() * &r;
    (moved - r).amax()
}
