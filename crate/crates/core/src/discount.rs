//! Discounted solvers: value iteration and policy iteration.
//!
//! Both compute the grid function solving the discrete discounted equation
//!
//! ```text
//!     lambda u_i + max_alpha [ sum_j w (u_i - u_j) - l ] = 0        (Bellman nodes)
//!     max(lambda u_b + ..., u_b - g_b) = 0                          (Dirichlet nodes)
//!     diag u_b + sum_j c_j u_j = g_b                                (Neumann nodes)
//! ```
//!
//! equivalently `u_i = min_alpha (l + sum_j w u_j) / (lambda + sum_j w)` with
//! the clamp entering the minimum on Dirichlet boundaries. Value iteration is
//! a damped Gauss-Seidel pass in alternating sweep directions; policy
//! iteration alternates exact banded policy evaluation with pointwise
//! improvement and is the route of choice for small discounts, where the
//! fixed-point contraction degrades to `1 - O(lambda h)`.

use crate::banded::BandedMatrix;
use crate::discretize::{BoundaryRow, DiscreteOperator};
use crate::error::{Error, Result};
use serde::Serialize;

/// Solved discounted value function with solver diagnostics.
#[derive(Clone, Debug, Serialize)]
pub struct ValueFunction {
    pub lambda: f64,
    pub values: Vec<f64>,
    /// Sweeps (value iteration) or evaluation rounds (policy iteration).
    pub sweeps: usize,
    /// Final sup-norm residual of the discrete equation.
    pub residual: f64,
    /// Measured sup-norm contraction factor of the last sweeps, if available.
    pub contraction: Option<f64>,
}

/// What governs each node under a fixed policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PolicyChoice {
    /// Index into `op.rows[node]`.
    Row(usize),
    /// Dirichlet clamp is active.
    Clamp,
    /// Neumann node: the oblique row, never a choice.
    Oblique,
}

#[derive(Clone, Debug, Serialize)]
pub struct Policy {
    pub choices: Vec<PolicyChoice>,
}

impl Policy {
    /// Control sample index selected at `node`, if a Bellman row is active.
    pub fn control_at(&self, op: &DiscreteOperator, node: usize) -> Option<usize> {
        match self.choices[node] {
            PolicyChoice::Row(k) => Some(op.rows[node][k].control),
            _ => None,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!(
            "discount rate must be positive and finite, got {lambda}"
        )));
    }
    Ok(())
}

/// Oblique row lookup: `Some((diag, offdiag, datum))` for Neumann nodes.
fn oblique_row(op: &DiscreteOperator, node: usize) -> Option<(&f64, &Vec<(usize, f64)>, &f64)> {
    let bp = op.grid.boundary_pos[node]?;
    match &op.boundary_rows[bp] {
        BoundaryRow::Oblique { diag, offdiag, datum } => Some((diag, offdiag, datum)),
        _ => None,
    }
}

fn clamp_value(op: &DiscreteOperator, node: usize) -> Option<f64> {
    let bp = op.grid.boundary_pos[node]?;
    match op.boundary_rows[bp] {
        BoundaryRow::Clamp { value } => Some(value),
        _ => None,
    }
}

/// Sup-norm residual of the discrete equation at `values`.
pub fn bellman_residual(op: &DiscreteOperator, lambda: f64, values: &[f64]) -> f64 {
    assert_eq!(values.len(), op.grid.n_nodes);
    let mut worst = 0.0f64;
    for node in 0..op.grid.n_nodes {
        if let Some((diag, offdiag, datum)) = oblique_row(op, node) {
            let mut r = diag * values[node] - datum;
            for &(j, c) in offdiag {
                r += c * values[j];
            }
            worst = worst.max(r.abs());
            continue;
        }
        // max_alpha of the row values; empty row sets occur only under a clamp.
        let mut f_h = f64::NEG_INFINITY;
        for row in &op.rows[node] {
            let mut v = row.weight_sum * values[node] - row.cost;
            for &(j, w) in &row.weights {
                v -= w * values[j];
            }
            f_h = f_h.max(v);
        }
        let interior_part =
            if f_h.is_finite() { lambda * values[node] + f_h } else { f64::NEG_INFINITY };
        let r = match clamp_value(op, node) {
            Some(g) => interior_part.max(values[node] - g),
            None => interior_part,
        };
        if r.is_finite() {
            worst = worst.max(r.abs());
        }
    }
    worst
}

/// One damped Gauss-Seidel update of a single Bellman node; returns the new
/// value. `tau = 1 / (lambda + max_alpha weight_sum)` keeps the update
/// monotone for the max-form operator.
#[inline]
fn node_update(op: &DiscreteOperator, lambda: f64, values: &[f64], node: usize) -> f64 {
    let u = values[node];
    let mut f_h = f64::NEG_INFINITY;
    let mut w_max = 0.0f64;
    for row in &op.rows[node] {
        let mut v = row.weight_sum * u - row.cost;
        for &(j, w) in &row.weights {
            v -= w * values[j];
        }
        f_h = f_h.max(v);
        w_max = w_max.max(row.weight_sum);
    }
    let mut unew = if f_h.is_finite() { u - (lambda * u + f_h) / (lambda + w_max) } else { u };
    if let Some(g) = clamp_value(op, node) {
        unew = if op.rows[node].is_empty() { g } else { unew.min(g) };
    }
    unew
}

/// Damped Gauss-Seidel value iteration with alternating sweep directions.
/// Neumann rows are solved exactly as the sweep passes them.
pub fn value_iteration(
    op: &DiscreteOperator,
    lambda: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<ValueFunction> {
    check_lambda(lambda)?;
    let n = op.grid.n_nodes;
    let mut u = vec![0.0f64; n];
    let mut change = f64::INFINITY;
    let mut contraction = None;
    let mut sweeps = 0usize;
    while sweeps < max_sweeps {
        let forward = sweeps % 2 == 0;
        let mut delta = 0.0f64;
        let mut visit = |node: usize, u: &mut Vec<f64>| {
            let unew = if let Some((diag, offdiag, datum)) = oblique_row(op, node) {
                let mut acc = *datum;
                for &(j, c) in offdiag {
                    acc -= c * u[j];
                }
                acc / diag
            } else {
                node_update(op, lambda, u, node)
            };
            let d = (unew - u[node]).abs();
            if d > delta {
                delta = d;
            }
            u[node] = unew;
        };
        if forward {
            for node in 0..n {
                visit(node, &mut u);
            }
        } else {
            for node in (0..n).rev() {
                visit(node, &mut u);
            }
        }
        sweeps += 1;
        let prev_change = change;
        change = delta;
        if prev_change.is_finite() && prev_change > 0.0 {
            contraction = Some(change / prev_change);
        }
        if change <= tol {
            let residual = bellman_residual(op, lambda, &u);
            return Ok(ValueFunction { lambda, values: u, sweeps, residual, contraction });
        }
    }
    Err(Error::Convergence {
        residual: bellman_residual(op, lambda, &u),
        iterations: sweeps,
        tolerance: tol,
    })
}

/// Assemble and solve the linear system of a fixed policy.
fn evaluate_policy(
    op: &DiscreteOperator,
    lambda: f64,
    policy: &Policy,
) -> Result<Vec<f64>> {
    let n = op.grid.n_nodes;
    let bw = if op.grid.dim == 1 { 1 } else { op.grid.shape[0] + 1 };
    let mut m = BandedMatrix::new(n, bw);
    let mut rhs = vec![0.0f64; n];
    for node in 0..n {
        match policy.choices[node] {
            PolicyChoice::Row(k) => {
                let row = &op.rows[node][k];
                m.add(node, node, lambda + row.weight_sum);
                for &(j, w) in &row.weights {
                    m.add(node, j, -w);
                }
                rhs[node] = row.cost;
            }
            PolicyChoice::Clamp => {
                let g = clamp_value(op, node).ok_or_else(|| {
                    Error::Solver(format!("clamp chosen at node {node} without a Dirichlet row"))
                })?;
                m.add(node, node, 1.0);
                rhs[node] = g;
            }
            PolicyChoice::Oblique => {
                let (diag, offdiag, datum) = oblique_row(op, node).ok_or_else(|| {
                    Error::Solver(format!("node {node} marked oblique without a Neumann row"))
                })?;
                m.add(node, node, *diag);
                for &(j, c) in offdiag {
                    m.add(node, j, c);
                }
                rhs[node] = *datum;
            }
        }
    }
    let lu = m.factorize()?;
    lu.solve(&mut rhs);
    Ok(rhs)
}

/// Candidate values at a node given current `values`; used for improvement.
fn best_choice(
    op: &DiscreteOperator,
    lambda: f64,
    values: &[f64],
    node: usize,
) -> (PolicyChoice, f64) {
    if oblique_row(op, node).is_some() {
        return (PolicyChoice::Oblique, values[node]);
    }
    let mut best = (PolicyChoice::Clamp, f64::INFINITY);
    if let Some(g) = clamp_value(op, node) {
        best = (PolicyChoice::Clamp, g);
    }
    for (k, row) in op.rows[node].iter().enumerate() {
        let mut acc = row.cost;
        for &(j, w) in &row.weights {
            acc += w * values[j];
        }
        let v = acc / (lambda + row.weight_sum);
        if v < best.1 {
            best = (PolicyChoice::Row(k), v);
        }
    }
    best
}

/// Howard policy iteration: exact banded evaluation alternating with
/// pointwise improvement. Values decrease monotonically between rounds; the
/// loop stops when no node strictly improves.
pub fn policy_iteration(
    op: &DiscreteOperator,
    lambda: f64,
    max_rounds: usize,
) -> Result<(ValueFunction, Policy)> {
    check_lambda(lambda)?;
    let n = op.grid.n_nodes;
    let zeros = vec![0.0f64; n];
    let mut policy = Policy {
        choices: (0..n).map(|node| best_choice(op, lambda, &zeros, node).0).collect(),
    };
    let mut values = evaluate_policy(op, lambda, &policy)?;
    let mut rounds = 1usize;
    // Switching only on strict improvement beyond a tiny margin rules out
    // cycling between tied policies.
    let margin = 1e-13;
    while rounds < max_rounds {
        let mut changed = false;
        for node in 0..n {
            let (choice, v) = best_choice(op, lambda, &values, node);
            if choice != policy.choices[node] && v < values[node] - margin * (1.0 + values[node].abs())
            {
                policy.choices[node] = choice;
                changed = true;
            }
        }
        if !changed {
            let residual = bellman_residual(op, lambda, &values);
            return Ok((
                ValueFunction { lambda, values, sweeps: rounds, residual, contraction: None },
                policy,
            ));
        }
        values = evaluate_policy(op, lambda, &policy)?;
        rounds += 1;
    }
    Err(Error::Convergence {
        residual: bellman_residual(op, lambda, &values),
        iterations: rounds,
        tolerance: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{POLICY_ITERATION_MAX_ROUNDS, VALUE_ITERATION_MAX_SWEEPS};
    use crate::discretize::build_scheme;
    use crate::problem::{constant_cost, eikonal_1d, viscous_quadratic_1d, BcKind};
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_cost_value_is_cost_over_lambda() {
        let spec = constant_cost(3.0, BcKind::StateConstraint);
        let op = build_scheme(&spec, &[41]).unwrap();
        for lambda in [1.0, 0.1] {
            let vi = value_iteration(&op, lambda, 1e-13, VALUE_ITERATION_MAX_SWEEPS).unwrap();
            let (pi, _) = policy_iteration(&op, lambda, POLICY_ITERATION_MAX_ROUNDS).unwrap();
            for node in 0..op.grid.n_nodes {
                assert_abs_diff_eq!(vi.values[node], 3.0 / lambda, epsilon = 1e-9);
                assert_abs_diff_eq!(pi.values[node], 3.0 / lambda, epsilon = 1e-11);
            }
            assert!(vi.residual < 1e-10);
            assert!(pi.residual < 1e-11);
        }
    }

    #[test]
    fn exit_problem_matches_the_transport_solution() {
        // Unit cost, exit through the nearest end at speed one, zero exit
        // cost: the discounted value is (1 - exp(-lambda (1-|x|))) / lambda.
        // The scheme is first order; the kink at the origin is outflowing.
        let spec = eikonal_1d(-1.0, BcKind::Dirichlet);
        let op = build_scheme(&spec, &[401]).unwrap();
        let lambda = 1e-3;
        let vi = value_iteration(&op, lambda, 1e-12, VALUE_ITERATION_MAX_SWEEPS).unwrap();
        for node in 0..op.grid.n_nodes {
            let x = op.grid.point(node)[0];
            let exact = (1.0 - (-lambda * (1.0 - x.abs())).exp()) / lambda;
            assert!(
                (vi.values[node] - exact).abs() <= 5e-3,
                "node {node}: got {}, want {exact}",
                vi.values[node]
            );
        }
    }

    #[test]
    fn value_and_policy_iteration_agree() {
        let spec = viscous_quadratic_1d(BcKind::Dirichlet);
        let op = build_scheme(&spec, &[101]).unwrap();
        let lambda = 0.1;
        let vi = value_iteration(&op, lambda, 1e-10, VALUE_ITERATION_MAX_SWEEPS).unwrap();
        let (pi, policy) = policy_iteration(&op, lambda, POLICY_ITERATION_MAX_ROUNDS).unwrap();
        let sup = vi
            .values
            .iter()
            .zip(&pi.values)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(sup <= 1e-6, "routes disagree by {sup}");
        assert!(pi.residual <= 1e-10);
        // Interior nodes pick Bellman rows.
        assert!(matches!(policy.choices[50], PolicyChoice::Row(_)));
    }

    #[test]
    fn cost_shift_moves_the_value_by_its_discounted_amount() {
        let lambda = 0.5;
        let base = eikonal_1d(1.0, BcKind::StateConstraint);
        let op = build_scheme(&base, &[81]).unwrap();
        let (v0, _) = policy_iteration(&op, lambda, POLICY_ITERATION_MAX_ROUNDS).unwrap();
        // Same dynamics, cost raised by 0.5 everywhere.
        let shifted = crate::problem::ProblemSpec {
            name: "shifted".into(),
            coefficients: crate::problem::Coefficients::analytic(
                |_x, _a| crate::problem::SymMat::zero(1),
                |_x, a| vec![-a[0]],
                |_x, _a| -1.0 + 0.5,
            ),
            ..base
        };
        let op_s = build_scheme(&shifted, &[81]).unwrap();
        let (v1, _) = policy_iteration(&op_s, lambda, POLICY_ITERATION_MAX_ROUNDS).unwrap();
        for node in 0..op.grid.n_nodes {
            assert_abs_diff_eq!(v1.values[node] - v0.values[node], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn neumann_rows_hold_exactly_after_the_solve() {
        let spec = eikonal_1d(1.0, BcKind::Neumann);
        let op = build_scheme(&spec, &[101]).unwrap();
        let (pi, _) = policy_iteration(&op, 0.05, POLICY_ITERATION_MAX_ROUNDS).unwrap();
        for node in [0, op.grid.n_nodes - 1] {
            let (diag, offdiag, datum) = oblique_row(&op, node).unwrap();
            let mut r = diag * pi.values[node] - datum;
            for &(j, c) in offdiag {
                r += c * pi.values[j];
            }
            assert!(r.abs() <= 1e-10, "oblique residual {r:.3e} at node {node}");
        }
    }

    #[test]
    fn dirichlet_values_never_exceed_the_datum() {
        let spec = eikonal_1d(1.0, BcKind::Dirichlet);
        let op = build_scheme(&spec, &[101]).unwrap();
        let (pi, _) = policy_iteration(&op, 0.2, POLICY_ITERATION_MAX_ROUNDS).unwrap();
        for &node in &op.grid.boundary_nodes {
            assert!(pi.values[node] <= 0.0 + 1e-12);
        }
        assert!(pi.residual <= 1e-11);
    }

    #[test]
    fn value_iteration_reports_contraction_below_one() {
        let spec = viscous_quadratic_1d(BcKind::Dirichlet);
        let op = build_scheme(&spec, &[61]).unwrap();
        let vi = value_iteration(&op, 1.0, 1e-10, VALUE_ITERATION_MAX_SWEEPS).unwrap();
        let kappa = vi.contraction.unwrap();
        assert!(kappa < 1.0, "measured contraction {kappa}");
    }

    #[test]
    fn sweep_cap_reports_nonconvergence() {
        let spec = viscous_quadratic_1d(BcKind::Dirichlet);
        let op = build_scheme(&spec, &[61]).unwrap();
        let err = value_iteration(&op, 0.01, 1e-12, 2).unwrap_err();
        assert!(matches!(err, Error::Convergence { iterations: 2, .. }));
    }

    #[test]
    fn rejects_nonpositive_discount() {
        let spec = constant_cost(1.0, BcKind::StateConstraint);
        let op = build_scheme(&spec, &[11]).unwrap();
        assert!(value_iteration(&op, 0.0, 1e-8, 10).is_err());
        assert!(policy_iteration(&op, -1.0, 10).is_err());
    }
}
