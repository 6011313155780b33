//! Critical values of the ergodic problem by three independent routes:
//! vanishing-discount extrapolation, the maximal-subsolution program, and the
//! Mather measure program. On the same discrete operator the LP pair is an
//! exact dual and the extrapolation agrees up to scheme error, which is the
//! backbone consistency check of the library.
//!
//! Conventions: the discounted solutions satisfy `lambda v + F_h[v] = 0`, the
//! ergodic pair `(c, u)` satisfies `F_h[u] = c`, and
//! `c = -lim lambda v^lambda`. The subsolution program minimizes `d` over
//! pairs `(v, d)` with every Bellman row of `v` at most `d` plus the boundary
//! inequalities of the regime; for Dirichlet data the critical value is
//! `max(d, 0)`: either the constrained interior dynamics are expensive enough
//! to dominate (`d > 0`), or boundary exit pins the value at zero.

use std::collections::BTreeMap;

use crate::constants::{
    CORRECTOR_LAMBDA_MIN, DICHOTOMY_FLOOR, DICHOTOMY_H_FACTOR, POLICY_ITERATION_MAX_ROUNDS,
};
use crate::discount::{policy_iteration, ValueFunction};
use crate::discretize::{BoundaryRow, DiscreteOperator};
use crate::error::{Error, Result};
use crate::lp::solve;
use crate::measures::{critical_assembly, mather_measure, MeasurePair};
use crate::problem::BcKind;
use serde::Serialize;

/// Which computation produced a critical value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Route {
    VanishingDiscount,
    #[serde(rename = "SubsolutionLP")]
    SubsolutionLp,
    #[serde(rename = "MeasureLP")]
    MeasureLp,
}

/// Regime classification for Dirichlet data: either the zero-level problem
/// with boundary exit is solvable (interior regime, `c = 0`), or the
/// constrained dynamics price a positive constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Dichotomy {
    InteriorRegime,
    ConstraintRegime,
}

/// One discount step of the vanishing-discount route.
#[derive(Clone, Debug, Serialize)]
pub struct LambdaRow {
    pub lambda: f64,
    /// `lambda * v^lambda` at the reference node.
    pub discounted_level: f64,
    /// Sup-norm residual of the discounted equation after the solve.
    pub residual: f64,
    pub rounds: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ErgodicResult {
    /// Critical value.
    pub c: f64,
    /// Route-specific ergodic profile. The vanishing-discount route returns
    /// the normalized iterate `v^{lambda_min} + c/lambda_min`; the LP routes
    /// return their dual certificate, which is a subsolution everywhere and
    /// tight on the support of the optimal measure. Its `residual` field
    /// holds the ergodic defect rather than a discounted one.
    pub corrector: ValueFunction,
    pub method: Route,
    /// Present for Dirichlet problems only.
    pub dichotomy: Option<Dichotomy>,
    /// Route-specific diagnostics by name.
    pub residuals: BTreeMap<String, f64>,
    /// Per-discount steps; empty for the LP routes.
    pub table: Vec<LambdaRow>,
    /// Subsolution certificate from the LP duals, when the route has one.
    pub certificate: Option<Vec<f64>>,
    /// Optimal subsolution level before the Dirichlet zero cap; `None` when
    /// the program is unbounded below (diffusive exit leaves no stationary
    /// interior measure).
    pub d_star: Option<f64>,
    pub measure: Option<MeasurePair>,
    pub reference_node: usize,
}

pub(crate) fn validate_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.len() < 3 {
        return Err(Error::Domain(format!(
            "discount schedule needs at least three entries for extrapolation, got {}",
            schedule.len()
        )));
    }
    for pair in schedule.windows(2) {
        if !(pair[1] < pair[0]) {
            return Err(Error::Domain(format!(
                "discount schedule must decrease strictly: {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if !schedule.iter().all(|&l| l > 0.0 && l.is_finite()) {
        return Err(Error::Domain("discount schedule must be positive and finite".into()));
    }
    Ok(())
}

/// Value at zero of the interpolating polynomial through the last three
/// points (Richardson extrapolation in the discount).
pub(crate) fn extrapolate_to_zero(points: &[(f64, f64)]) -> f64 {
    let tail = &points[points.len().saturating_sub(3)..];
    let mut value = 0.0;
    for (k, &(xk, yk)) in tail.iter().enumerate() {
        let mut basis = 1.0;
        for (j, &(xj, _)) in tail.iter().enumerate() {
            if j != k {
                basis *= xj / (xj - xk);
            }
        }
        value += yk * basis;
    }
    value
}

/// Classification threshold: scheme error floor.
pub fn dichotomy_threshold(op: &DiscreteOperator) -> f64 {
    (DICHOTOMY_H_FACTOR * op.h()).max(DICHOTOMY_FLOOR)
}

fn classify(op: &DiscreteOperator, c: f64) -> Option<Dichotomy> {
    if op.bc_kind != BcKind::Dirichlet {
        return None;
    }
    Some(if c > dichotomy_threshold(op) {
        Dichotomy::ConstraintRegime
    } else {
        Dichotomy::InteriorRegime
    })
}

/// Ergodic defect of a grid function at level `c`, honoring the boundary
/// regime: Bellman rows contribute `|max_row(u) - c|`, Dirichlet nodes relax
/// that through the clamp (`max(row defect, u - g)` in absolute value), and
/// oblique rows contribute their own residual in natural units.
pub fn ergodic_residual(op: &DiscreteOperator, u: &[f64], c: f64) -> f64 {
    let mut worst = 0.0f64;
    for (node, rows) in op.rows.iter().enumerate() {
        let mut bellman = f64::NEG_INFINITY;
        for row in rows {
            let mut v = row.weight_sum * u[node] - row.cost;
            for &(j, w) in &row.weights {
                v -= w * u[j];
            }
            bellman = bellman.max(v);
        }
        let clamp = op.grid.boundary_pos[node].and_then(|bp| match &op.boundary_rows[bp] {
            BoundaryRow::Clamp { value } => Some(u[node] - value),
            _ => None,
        });
        let defect = match (bellman.is_finite(), clamp) {
            (true, Some(gap)) => (bellman - c).max(gap),
            (true, None) => bellman - c,
            (false, Some(gap)) => gap,
            (false, None) => continue,
        };
        worst = worst.max(defect.abs());
    }
    for (bp, brow) in op.boundary_rows.iter().enumerate() {
        if let BoundaryRow::Oblique { diag, offdiag, datum } = brow {
            let node = op.grid.boundary_nodes[bp];
            let mut r = diag * u[node] - datum;
            for &(j, w) in offdiag {
                r += w * u[j];
            }
            worst = worst.max(r.abs());
        }
    }
    worst
}

/// One-sided subsolution defect of `u` at level `d`: how far any Bellman row
/// rises above the level, plus the boundary inequalities of the regime.
fn subsolution_defect(op: &DiscreteOperator, u: &[f64], d: f64) -> f64 {
    let mut worst = 0.0f64;
    for (node, rows) in op.rows.iter().enumerate() {
        for row in rows {
            let mut v = row.weight_sum * u[node] - row.cost;
            for &(j, w) in &row.weights {
                v -= w * u[j];
            }
            worst = worst.max(v - d);
        }
    }
    for (bp, brow) in op.boundary_rows.iter().enumerate() {
        let node = op.grid.boundary_nodes[bp];
        match brow {
            BoundaryRow::Clamp { value } => worst = worst.max(u[node] - value),
            BoundaryRow::Oblique { diag, offdiag, datum } => {
                let mut r = diag * u[node] - datum;
                for &(j, w) in offdiag {
                    r += w * u[j];
                }
                worst = worst.max(r);
            }
            BoundaryRow::Constraint => {}
        }
    }
    worst.max(0.0)
}

/// Critical value by discount extrapolation: solve along the schedule, track
/// `lambda v^lambda` at the center node, extrapolate through the last three
/// steps to zero discount, and return the normalized final iterate as the
/// corrector.
pub fn critical_value_vanishing_discount(
    op: &DiscreteOperator,
    schedule: &[f64],
) -> Result<ErgodicResult> {
    validate_schedule(schedule)?;
    let z = op.grid.center_node();
    let mut table = Vec::with_capacity(schedule.len());
    let mut points = Vec::with_capacity(schedule.len());
    let mut last: Option<ValueFunction> = None;
    for &lambda in schedule {
        let (vf, _) = policy_iteration(op, lambda, POLICY_ITERATION_MAX_ROUNDS)?;
        let level = lambda * vf.values[z];
        table.push(LambdaRow {
            lambda,
            discounted_level: level,
            residual: vf.residual,
            rounds: vf.sweeps,
        });
        points.push((lambda, level));
        last = Some(vf);
    }
    let c = -extrapolate_to_zero(&points);

    // The estimates -lambda v should approach c steadily; flag reversals
    // against the direction the sequence starts out with.
    let estimates: Vec<f64> = points.iter().map(|&(_, lvl)| -lvl).collect();
    let dir = (estimates[1] - estimates[0]).signum();
    let mut monotonicity_defect = 0.0f64;
    for w in estimates.windows(2) {
        monotonicity_defect = monotonicity_defect.max(-dir * (w[1] - w[0]));
    }

    let lambda_min = *schedule.last().expect("validated nonempty");
    let mut vf = last.expect("validated nonempty");
    for v in &mut vf.values {
        *v += c / lambda_min;
    }
    let ergodic_defect = ergodic_residual(op, &vf.values, c);
    let corrector = ValueFunction {
        lambda: lambda_min,
        values: vf.values,
        sweeps: vf.sweeps,
        residual: ergodic_defect,
        contraction: vf.contraction,
    };

    let mut residuals = BTreeMap::new();
    residuals.insert("lambda_min".into(), lambda_min);
    residuals.insert("level_monotonicity_defect".into(), monotonicity_defect);
    residuals.insert("corrector_ergodic_residual".into(), ergodic_defect);

    Ok(ErgodicResult {
        c,
        corrector,
        method: Route::VanishingDiscount,
        dichotomy: classify(op, c),
        residuals,
        table,
        certificate: None,
        d_star: None,
        measure: None,
        reference_node: z,
    })
}

/// Critical value by the maximal-subsolution program: minimize `d` subject to
/// every Bellman row of `v` at most `d` plus the boundary inequalities
/// (Dirichlet `v <= g`, Neumann oblique rows at most their data, none under a
/// state constraint). Solved through its standard-form dual, the stationary
/// measure program, so the certificate `v` is read off the row duals.
///
/// Diffusive Dirichlet problems admit no stationary interior measure; the
/// program is then unbounded below and the zero cap of the Dirichlet critical
/// value is returned with no finite level.
pub fn critical_value_subsolution_lp(op: &DiscreteOperator) -> Result<ErgodicResult> {
    let asm = critical_assembly(op, false);
    match solve(&asm.lp) {
        Ok(out) => {
            let d_star = -out.objective;
            let c = match op.bc_kind {
                BcKind::Dirichlet => d_star.max(0.0),
                _ => d_star,
            };
            let u = out.y[..op.grid.n_nodes].to_vec();
            let defect = subsolution_defect(op, &u, d_star);
            let mut residuals = BTreeMap::new();
            residuals.insert("d_star".into(), d_star);
            residuals.insert("certificate_defect".into(), defect);
            let corrector = ValueFunction {
                lambda: 0.0,
                values: u.clone(),
                sweeps: out.pivots,
                residual: defect,
                contraction: None,
            };
            Ok(ErgodicResult {
                c,
                corrector,
                method: Route::SubsolutionLp,
                dichotomy: classify(op, c),
                residuals,
                table: Vec::new(),
                certificate: Some(u),
                d_star: Some(d_star),
                measure: None,
                reference_node: op.grid.center_node(),
            })
        }
        Err(Error::LpInfeasible(_)) if op.bc_kind == BcKind::Dirichlet => {
            // No stationary interior measure: the level is unbounded below
            // and exit pins the critical value at zero. Fall back to the
            // discounted route for a usable profile at that level.
            let c = 0.0;
            let corrector = corrector(op, c)?;
            let mut residuals = BTreeMap::new();
            residuals.insert("subsolution_level_unbounded".into(), 1.0);
            residuals.insert("corrector_ergodic_residual".into(), corrector.residual);
            Ok(ErgodicResult {
                c,
                corrector,
                method: Route::SubsolutionLp,
                dichotomy: Some(Dichotomy::InteriorRegime),
                residuals,
                table: Vec::new(),
                certificate: None,
                d_star: None,
                measure: None,
                reference_node: op.grid.center_node(),
            })
        }
        Err(e) => Err(e),
    }
}

/// Critical value by the Mather program at `-c = min <mu, l>`; the minimizing
/// measure is returned, and for Dirichlet data the mass identity
/// `c (mu1_mass - 1) = 0` is enforced: a positive critical value requires the
/// interior component to carry full mass.
pub fn critical_value_measure_lp(op: &DiscreteOperator, z: usize) -> Result<ErgodicResult> {
    if z >= op.grid.n_nodes {
        return Err(Error::Domain(format!(
            "reference node {z} out of range ({} nodes)",
            op.grid.n_nodes
        )));
    }
    let sol = mather_measure(op)?;
    let c = -sol.objective;
    let mut residuals = BTreeMap::new();
    residuals.insert("mu1_mass".into(), sol.measure.mu1_mass);
    residuals.insert("mu2_mass".into(), sol.measure.mu2_mass);
    if op.bc_kind == BcKind::Dirichlet {
        let identity = (c * (sol.measure.mu1_mass - 1.0)).abs();
        residuals.insert("dirichlet_mass_identity".into(), identity);
        if identity > 1e-6 {
            return Err(Error::LpNumerics(format!(
                "positive critical value {c} with interior mass {} violates the mass identity",
                sol.measure.mu1_mass
            )));
        }
    }
    let u = sol.node_duals.clone();
    let defect = subsolution_defect_interior(op, &u, c);
    residuals.insert("certificate_interior_defect".into(), defect);
    let corrector = ValueFunction {
        lambda: 0.0,
        values: u.clone(),
        sweeps: sol.iterations,
        residual: defect,
        contraction: None,
    };
    Ok(ErgodicResult {
        c,
        corrector,
        method: Route::MeasureLp,
        dichotomy: classify(op, c),
        residuals,
        table: Vec::new(),
        certificate: Some(u),
        d_star: None,
        measure: Some(sol.measure),
        reference_node: z,
    })
}

/// Bellman-row defect only: the Mather program's Dirichlet variant carries no
/// boundary coupling, so its certificate bounds the interior rows alone.
fn subsolution_defect_interior(op: &DiscreteOperator, u: &[f64], d: f64) -> f64 {
    let mut worst = 0.0f64;
    for (node, rows) in op.rows.iter().enumerate() {
        for row in rows {
            let mut v = row.weight_sum * u[node] - row.cost;
            for &(j, w) in &row.weights {
                v -= w * u[j];
            }
            worst = worst.max(v - d);
        }
    }
    worst.max(0.0)
}

/// Normalized vanishing-discount iterate at the smallest standing discount:
/// `v^lambda + c/lambda` solves the ergodic problem at level `c` up to
/// `O(lambda + h)`. The returned `residual` is that ergodic defect; values
/// above about `10 (h + lambda)` suggest `c` is not critical.
pub fn corrector(op: &DiscreteOperator, c: f64) -> Result<ValueFunction> {
    let lambda = CORRECTOR_LAMBDA_MIN;
    let (vf, _) = policy_iteration(op, lambda, POLICY_ITERATION_MAX_ROUNDS)?;
    let mut values = vf.values;
    for v in &mut values {
        *v += c / lambda;
    }
    let residual = ergodic_residual(op, &values, c);
    Ok(ValueFunction {
        lambda,
        values,
        sweeps: vf.sweeps,
        residual,
        contraction: vf.contraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::DEFAULT_SCHEDULE;
    use crate::discretize::build_scheme;
    use crate::problem::{constant_cost, eikonal_1d, viscous_quadratic_1d};
    use approx::assert_abs_diff_eq;

    #[test]
    fn three_routes_agree_on_the_constant_problem() {
        let op = build_scheme(&constant_cost(3.0, BcKind::StateConstraint), &[21]).unwrap();
        let z = op.grid.center_node();
        let van = critical_value_vanishing_discount(&op, &DEFAULT_SCHEDULE).unwrap();
        let sub = critical_value_subsolution_lp(&op).unwrap();
        let mea = critical_value_measure_lp(&op, z).unwrap();
        for r in [&van, &sub, &mea] {
            assert_abs_diff_eq!(r.c, -3.0, epsilon = 1e-9);
            assert!(r.dichotomy.is_none());
        }
        assert_eq!(van.table.len(), DEFAULT_SCHEDULE.len());
        // v = 3/lambda exactly, so the normalized iterate vanishes.
        for &v in &van.corrector.values {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn dirichlet_dichotomy_splits_by_the_optimal_level() {
        let plus = build_scheme(&eikonal_1d(1.0, BcKind::Dirichlet), &[101]).unwrap();
        let sub = critical_value_subsolution_lp(&plus).unwrap();
        assert_abs_diff_eq!(sub.c, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sub.d_star.unwrap(), 1.0, epsilon = 1e-9);
        assert_eq!(sub.dichotomy, Some(Dichotomy::ConstraintRegime));
        let mea = critical_value_measure_lp(&plus, plus.grid.center_node()).unwrap();
        assert_abs_diff_eq!(mea.c, 1.0, epsilon = 1e-9);
        assert_eq!(mea.dichotomy, Some(Dichotomy::ConstraintRegime));
        assert_abs_diff_eq!(mea.measure.as_ref().unwrap().mu1_mass, 1.0, epsilon = 1e-8);

        let minus = build_scheme(&eikonal_1d(-1.0, BcKind::Dirichlet), &[101]).unwrap();
        let sub = critical_value_subsolution_lp(&minus).unwrap();
        assert_abs_diff_eq!(sub.c, 0.0, epsilon = 1e-9);
        assert!(sub.d_star.unwrap() < -0.5, "exit regime has a negative level");
        assert_eq!(sub.dichotomy, Some(Dichotomy::InteriorRegime));
        let mea = critical_value_measure_lp(&minus, minus.grid.center_node()).unwrap();
        assert_abs_diff_eq!(mea.c, 0.0, epsilon = 1e-9);
        assert_eq!(mea.dichotomy, Some(Dichotomy::InteriorRegime));
    }

    #[test]
    fn diffusive_exit_has_no_finite_subsolution_level() {
        let op = build_scheme(&viscous_quadratic_1d(BcKind::Dirichlet), &[41]).unwrap();
        let sub = critical_value_subsolution_lp(&op).unwrap();
        assert_eq!(sub.c, 0.0);
        assert!(sub.d_star.is_none());
        assert_eq!(sub.dichotomy, Some(Dichotomy::InteriorRegime));
        assert!(sub.residuals.contains_key("subsolution_level_unbounded"));
        // The dual route agrees exactly: all mass pads away.
        let mea = critical_value_measure_lp(&op, op.grid.center_node()).unwrap();
        assert_abs_diff_eq!(mea.c, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(mea.measure.as_ref().unwrap().mu2_mass, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn vanishing_discount_extrapolates_the_exit_problem() {
        let op = build_scheme(&eikonal_1d(-1.0, BcKind::Dirichlet), &[201]).unwrap();
        let van = critical_value_vanishing_discount(&op, &DEFAULT_SCHEDULE).unwrap();
        assert!(van.c.abs() <= 5e-3, "c = {}", van.c);
        assert_eq!(van.dichotomy, Some(Dichotomy::InteriorRegime));
        let mea = critical_value_measure_lp(&op, op.grid.center_node()).unwrap();
        assert!((van.c - mea.c).abs() <= 5e-2);
        // The corrector approaches the distance to the exit set.
        let mut worst = 0.0f64;
        for node in 0..op.grid.n_nodes {
            let x = op.grid.point(node)[0];
            worst = worst.max((van.corrector.values[node] - (1.0 - x.abs())).abs());
        }
        assert!(worst <= 5e-2, "corrector misses the distance profile by {worst}");
    }

    #[test]
    fn reflected_motion_prices_at_the_cost_level() {
        for m in [-1.0, 1.0] {
            let op = build_scheme(&eikonal_1d(m, BcKind::Neumann), &[101]).unwrap();
            let sub = critical_value_subsolution_lp(&op).unwrap();
            let mea = critical_value_measure_lp(&op, op.grid.center_node()).unwrap();
            let van = critical_value_vanishing_discount(&op, &DEFAULT_SCHEDULE).unwrap();
            assert_abs_diff_eq!(sub.c, m, epsilon = 1e-9);
            assert_abs_diff_eq!(mea.c, m, epsilon = 1e-9);
            // Constants solve both the interior and the reflecting rows, so
            // the discounted family is exactly -m / lambda here.
            assert_abs_diff_eq!(van.c, m, epsilon = 1e-9);
        }
    }

    #[test]
    fn subsolution_certificate_replays_its_inequalities() {
        for bc in [BcKind::StateConstraint, BcKind::Dirichlet] {
            let op = build_scheme(&eikonal_1d(1.0, bc), &[81]).unwrap();
            let sub = critical_value_subsolution_lp(&op).unwrap();
            let u = sub.certificate.as_ref().unwrap();
            let d = sub.d_star.unwrap();
            for (node, rows) in op.rows.iter().enumerate() {
                for row in rows {
                    let mut v = row.weight_sum * u[node] - row.cost;
                    for &(j, w) in &row.weights {
                        v -= w * u[j];
                    }
                    assert!(v <= d + 1e-7, "row at node {node} exceeds the level: {v} > {d}");
                }
            }
            if bc == BcKind::Dirichlet {
                for (bp, brow) in op.boundary_rows.iter().enumerate() {
                    if let BoundaryRow::Clamp { value } = brow {
                        let node = op.grid.boundary_nodes[bp];
                        assert!(u[node] <= value + 1e-9, "clamp certificate fails at {node}");
                    }
                }
            }
            assert!(sub.residuals["certificate_defect"] <= 1e-7);
        }
    }

    #[test]
    fn corrector_solves_the_ergodic_equation_to_first_order() {
        let op = build_scheme(&eikonal_1d(1.0, BcKind::StateConstraint), &[101]).unwrap();
        let c = critical_value_subsolution_lp(&op).unwrap().c;
        let corr = corrector(&op, c).unwrap();
        assert!(
            corr.residual <= 10.0 * (op.h() + corr.lambda),
            "ergodic defect {} at lambda {}",
            corr.residual,
            corr.lambda
        );
        // All constants solve this instance; the normalized iterate is flat.
        let lo = corr.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = corr.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo <= 5e-2, "oscillation {} should be tiny", hi - lo);
    }

    #[test]
    fn shifting_the_cost_shifts_the_critical_value_exactly() {
        let base = build_scheme(&eikonal_1d(1.0, BcKind::StateConstraint), &[61]).unwrap();
        let c0 = critical_value_subsolution_lp(&base).unwrap().c;
        // Shift every row cost by +0.7 on a cloned operator.
        let mut op = base.clone();
        for rows in &mut op.rows {
            for row in rows {
                row.cost += 0.7;
            }
        }
        let c1 = critical_value_subsolution_lp(&op).unwrap().c;
        assert_abs_diff_eq!(c1, c0 - 0.7, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_schedules_are_rejected() {
        let op = build_scheme(&constant_cost(1.0, BcKind::StateConstraint), &[11]).unwrap();
        assert!(critical_value_vanishing_discount(&op, &[]).is_err());
        assert!(critical_value_vanishing_discount(&op, &[0.1, 0.05]).is_err());
        assert!(critical_value_vanishing_discount(&op, &[0.1, 0.1, 0.05]).is_err());
        assert!(critical_value_vanishing_discount(&op, &[0.1, 0.05, -0.2]).is_err());
    }
}
