//! Occupation-measure linear programs: Green measures (positive discount),
//! Mather measures (zero discount), dual-cone membership checks, and the
//! constructive mean-cost shift.
//!
//! The discounted value function is the optimum of a finite LP over discrete
//! subsolutions; the programs built here are its exact duals. Variables are a
//! weight per Bellman row (`mu1`, the node-control occupation) plus one per
//! boundary row (`mu2`). For every node the adjoint balance holds:
//!
//! ```text
//!   sum_a mu1[k][a] (lambda + W) - sum_{i,a} mu1[i][a] w[i][a][k] + coupling_k
//!       = lambda * [k == z],
//! ```
//!
//! where the coupling comes from clamp columns (Dirichlet) or oblique columns
//! (Neumann). Summing the balance over nodes yields the normalizations: state
//! constraint `sum mu1 = 1`; Dirichlet `sum mu1 + sum mu2 = 1` after scaling
//! the clamp weights by `1/lambda` (the stored convention); Neumann
//! `sum mu1 = 1` with `mu2` free, because oblique rows annihilate constants.
//!
//! At zero discount the balance becomes stationarity plus an explicit mass
//! row. The Dirichlet zero-discount program replaces clamp coupling with pad
//! columns that enter only the mass row, realizing "interior mass at most
//! one"; its optimum is minus the critical value in every regime.

use crate::constants::{CONE_MEMBERSHIP_TOL, MEMBERSHIP_BOX_FACTOR};
use crate::discretize::{BoundaryRow, DiscreteOperator, Grid};
use crate::discount::policy_iteration;
use crate::error::{Error, Result};
use crate::lp::{solve, SparseLp};
use crate::problem::{BcKind, ProblemSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const NORMALIZATION_TOL: f64 = 1e-7;
const WEIGHT_KEEP_TOL: f64 = 1e-14;

/// A discrete occupation-measure pair.
///
/// `mu1` holds `(node, control sample index, weight)` atoms over node-control
/// pairs; `mu2` holds `(boundary node, weight)` atoms. For Dirichlet pairs
/// with positive discount, `mu2` stores the exit weights divided by the
/// discount so that `mu1` and `mu2` masses sum to one; at zero discount the
/// Dirichlet `mu2` holds the pad masses of the mass row (the defect of
/// interior mass from one). Neumann `mu2` is stored as is and carries no
/// normalization.
#[derive(Clone, Debug, Serialize)]
pub struct MeasurePair {
    pub lambda: f64,
    /// Reference node of the balance right-hand side (positive discount only).
    pub z_tag: Option<usize>,
    pub bc_kind: BcKind,
    pub mu1: Vec<(usize, usize, f64)>,
    pub mu2: Vec<(usize, f64)>,
    pub mu1_mass: f64,
    pub mu2_mass: f64,
}

impl MeasurePair {
    /// Node marginal of `mu1`.
    pub fn x_marginal(&self, n_nodes: usize) -> Vec<f64> {
        let mut rho = vec![0.0; n_nodes];
        for &(node, _, w) in &self.mu1 {
            rho[node] += w;
        }
        rho
    }

    /// `<mu1, f>` for a grid function (constant in the control).
    pub fn node_pairing(&self, values: &[f64]) -> f64 {
        self.mu1.iter().map(|&(node, _, w)| w * values[node]).sum()
    }

    /// `<mu1, l>` with the cost evaluated from the problem data.
    pub fn cost_pairing(&self, spec: &ProblemSpec, grid: &Grid) -> f64 {
        let dim = grid.dim;
        self.mu1
            .iter()
            .map(|&(node, ci, w)| {
                let pt = grid.point(node);
                w * spec.coefficients.cost(&pt[..dim], ci, &spec.controls.samples[ci])
            })
            .sum()
    }

    /// Verify the probability normalization of the measure class.
    pub fn check_normalization(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::LpNumerics(detail));
        if self.mu1.iter().any(|&(_, _, w)| w < 0.0) || self.mu2.iter().any(|&(_, w)| w < 0.0) {
            return bad("measure has a negative weight".into());
        }
        match self.bc_kind {
            BcKind::StateConstraint => {
                if (self.mu1_mass - 1.0).abs() > NORMALIZATION_TOL || !self.mu2.is_empty() {
                    return bad(format!(
                        "state-constraint measure mass {} (boundary atoms {})",
                        self.mu1_mass,
                        self.mu2.len()
                    ));
                }
            }
            BcKind::Dirichlet => {
                if (self.mu1_mass + self.mu2_mass - 1.0).abs() > NORMALIZATION_TOL {
                    return bad(format!(
                        "Dirichlet masses {} + {} should sum to one",
                        self.mu1_mass, self.mu2_mass
                    ));
                }
            }
            BcKind::Neumann => {
                if (self.mu1_mass - 1.0).abs() > NORMALIZATION_TOL {
                    return bad(format!("Neumann interior mass {} should be one", self.mu1_mass));
                }
            }
        }
        Ok(())
    }
}

/// Optimal measure with its LP certificates. These exist only for programs
/// solved to optimality: infeasibility or unboundedness of a measure program
/// indicates a structural bug upstream and surfaces as an error instead.
#[derive(Clone, Debug, Serialize)]
pub struct LpSolution {
    pub objective: f64,
    pub measure: MeasurePair,
    /// Duals of the per-node balance rows; for Green programs these replay
    /// the discounted value function.
    pub node_duals: Vec<f64>,
    /// Dual of the mass row, when the program has one.
    pub norm_dual: Option<f64>,
    /// Final simplex basis (optima may be degenerate; the vertex is pinned
    /// by recording which columns carry it).
    pub basis: Vec<usize>,
    pub iterations: usize,
}

pub(crate) struct Assembly {
    pub lp: SparseLp,
    /// `(node, index into op.rows[node])` per mu1 column.
    pub mu1_cols: Vec<(usize, usize)>,
    /// Boundary position per mu2 column.
    pub mu2_cols: Vec<usize>,
    pub norm_row: Option<usize>,
}

/// Balance program whose optimum is `lambda v^lambda(z)`.
pub(crate) fn green_assembly(op: &DiscreteOperator, z: usize, lambda: f64) -> Assembly {
    let n = op.grid.n_nodes;
    let mut lp = SparseLp::new(n);
    let mut mu1_cols = Vec::new();
    let mut entries: Vec<(usize, f64)> = Vec::new();
    for (node, rows) in op.rows.iter().enumerate() {
        for (k, row) in rows.iter().enumerate() {
            entries.clear();
            entries.push((node, lambda + row.weight_sum));
            for &(j, w) in &row.weights {
                entries.push((j, -w));
            }
            lp.add_column(row.cost, &entries);
            mu1_cols.push((node, k));
        }
    }
    let mut mu2_cols = Vec::new();
    for (bp, brow) in op.boundary_rows.iter().enumerate() {
        let node = op.grid.boundary_nodes[bp];
        match brow {
            BoundaryRow::Constraint => {}
            BoundaryRow::Clamp { value } => {
                lp.add_column(*value, &[(node, 1.0)]);
                mu2_cols.push(bp);
            }
            BoundaryRow::Oblique { diag, offdiag, datum } => {
                entries.clear();
                entries.push((node, *diag));
                entries.extend(offdiag.iter().cloned());
                lp.add_column(*datum, &entries);
                mu2_cols.push(bp);
            }
        }
    }
    lp.set_rhs(z, lambda);
    Assembly { lp, mu1_cols, mu2_cols, norm_row: None }
}

/// Zero-discount program: stationarity plus an explicit mass row.
///
/// With `dirichlet_pads` the clamp coupling is dropped and pad columns enter
/// the mass row instead (the Mather program, optimum `-c`); without it the
/// clamp columns couple into stationarity (the subsolution-route program,
/// optimum `-d*`). The two coincide for state constraint and Neumann.
pub(crate) fn critical_assembly(op: &DiscreteOperator, dirichlet_pads: bool) -> Assembly {
    let n = op.grid.n_nodes;
    let norm = n;
    let mut lp = SparseLp::new(n + 1);
    let mut mu1_cols = Vec::new();
    let mut entries: Vec<(usize, f64)> = Vec::new();
    // Under a clamped boundary, only columns whose row stays inside the
    // stationary kernel can be positive in a feasible point; the others are
    // dropped so the solver never prices the near-feasible but exponentially
    // ill-conditioned vertices they span.
    let alive = if op.bc_kind == BcKind::Dirichlet {
        stationary_kernel(op)
    } else {
        vec![true; n]
    };
    for (node, rows) in op.rows.iter().enumerate() {
        if !alive[node] {
            continue;
        }
        for (k, row) in rows.iter().enumerate() {
            if !row.weights.iter().all(|&(j, _)| alive[j]) {
                continue;
            }
            entries.clear();
            entries.push((node, row.weight_sum));
            for &(j, w) in &row.weights {
                entries.push((j, -w));
            }
            entries.push((norm, 1.0));
            lp.add_column(row.cost, &entries);
            mu1_cols.push((node, k));
        }
    }
    let mut mu2_cols = Vec::new();
    for (bp, brow) in op.boundary_rows.iter().enumerate() {
        let node = op.grid.boundary_nodes[bp];
        match brow {
            BoundaryRow::Constraint => {}
            BoundaryRow::Clamp { value } => {
                if dirichlet_pads {
                    lp.add_column(0.0, &[(norm, 1.0)]);
                } else {
                    lp.add_column(*value, &[(node, 1.0)]);
                }
                mu2_cols.push(bp);
            }
            BoundaryRow::Oblique { diag, offdiag, datum } => {
                entries.clear();
                entries.push((node, *diag));
                entries.extend(offdiag.iter().cloned());
                lp.add_column(*datum, &entries);
                mu2_cols.push(bp);
            }
        }
    }
    lp.set_rhs(norm, 1.0);
    Assembly { lp, mu1_cols, mu2_cols, norm_row: Some(norm) }
}

/// Largest set of nodes on which the zero-discount stationarity rows can
/// carry probability mass. Summing every balance row cancels each transition
/// column (its weights reappear negated at the neighbors), so any feasible
/// point pins the boundary clamps at zero and must balance exactly on its
/// support; that forces the support to be closed under at least one control
/// row per node, and conversely a conservative chain on a finite closed set
/// always owns a stationary distribution. The set is computed by peeling:
/// drop nodes whose every row places weight on a dropped node. An empty
/// fixpoint certifies infeasibility structurally — important because a chain
/// can drain toward the clamps at an exponentially small rate (strong inward
/// drift over a thin diffusion), in which case the infeasibility sits far
/// below anything floating point arithmetic can resolve, while the columns
/// outside the kernel still offer the solver arbitrarily ill-conditioned
/// near-feasible vertices. Restricting the program to the kernel removes
/// exactly the columns that vanish in every feasible point.
///
/// The argument needs absorption to be the only boundary interaction, so it
/// applies to clamped (Dirichlet) problems; reflecting relations recirculate
/// mass through boundary columns the peeling cannot see.
pub(crate) fn stationary_kernel(op: &DiscreteOperator) -> Vec<bool> {
    let n = op.grid.n_nodes;
    let mut alive: Vec<bool> = op.rows.iter().map(|rows| !rows.is_empty()).collect();
    loop {
        let mut changed = false;
        for node in 0..n {
            if !alive[node] {
                continue;
            }
            let closed = op.rows[node]
                .iter()
                .any(|row| row.weights.iter().all(|&(j, _)| alive[j]));
            if !closed {
                alive[node] = false;
                changed = true;
            }
        }
        if !changed {
            return alive;
        }
    }
}

fn extract_pair(
    op: &DiscreteOperator,
    asm: &Assembly,
    x: &[f64],
    lambda: f64,
    z_tag: Option<usize>,
) -> MeasurePair {
    let mut mu1 = Vec::new();
    let mut mu1_mass = 0.0;
    for (col, &(node, k)) in asm.mu1_cols.iter().enumerate() {
        let w = x[col];
        if w > WEIGHT_KEEP_TOL {
            mu1.push((node, op.rows[node][k].control, w));
            mu1_mass += w;
        }
    }
    let mut mu2 = Vec::new();
    let mut mu2_mass = 0.0;
    // Dirichlet clamp weights at positive discount are stored scaled by
    // 1/lambda so the pair masses sum to one.
    let scale = if op.bc_kind == BcKind::Dirichlet && lambda > 0.0 { 1.0 / lambda } else { 1.0 };
    for (j, &bp) in asm.mu2_cols.iter().enumerate() {
        let w = x[asm.mu1_cols.len() + j] * scale;
        if w > WEIGHT_KEEP_TOL {
            mu2.push((op.grid.boundary_nodes[bp], w));
            mu2_mass += w;
        }
    }
    MeasurePair { lambda, z_tag, bc_kind: op.bc_kind, mu1, mu2, mu1_mass, mu2_mass }
}

/// Solve the Green-measure program at reference node `z`: the optimum equals
/// `lambda v^lambda(z)` exactly (finite LP duality with the discrete
/// subsolution program), and the balance-row duals replay the value function.
pub fn green_measure(op: &DiscreteOperator, z: usize, lambda: f64) -> Result<LpSolution> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("Green measure needs lambda > 0, got {lambda}")));
    }
    if z >= op.grid.n_nodes {
        return Err(Error::Domain(format!(
            "reference node {z} out of range ({} nodes)",
            op.grid.n_nodes
        )));
    }
    let asm = green_assembly(op, z, lambda);
    let out = solve(&asm.lp)?;
    let pair = extract_pair(op, &asm, &out.x, lambda, Some(z));
    pair.check_normalization()?;
    Ok(LpSolution {
        objective: out.objective,
        measure: pair,
        node_duals: out.y[..op.grid.n_nodes].to_vec(),
        norm_dual: None,
        basis: out.basis,
        iterations: out.pivots,
    })
}

/// Solve the Mather program: the optimum is `-c` for the critical value `c`
/// of the boundary regime, and the optimizer is a discrete Mather measure.
pub fn mather_measure(op: &DiscreteOperator) -> Result<LpSolution> {
    let asm = critical_assembly(op, true);
    let out = solve(&asm.lp)?;
    let pair = extract_pair(op, &asm, &out.x, 0.0, None);
    pair.check_normalization()?;
    Ok(LpSolution {
        objective: out.objective,
        measure: pair,
        node_duals: out.y[..op.grid.n_nodes].to_vec(),
        norm_dual: asm.norm_row.map(|r| out.y[r]),
        basis: out.basis,
        iterations: out.pivots,
    })
}

/// Duality audit at one reference node.
#[derive(Clone, Debug, Serialize)]
pub struct GapReport {
    pub lambda: f64,
    pub z: usize,
    pub lambda_v_z: f64,
    pub objective: f64,
    /// |lambda v(z) - LP optimum|.
    pub gap: f64,
    /// Worst slackness of an active column against the solved value function:
    /// every carried Bellman row must be tight at the optimum.
    pub max_active_slack: f64,
}

/// Solve both sides independently (policy iteration and the measure LP) and
/// report the duality gap with complementary slackness.
pub fn duality_gap(op: &DiscreteOperator, z: usize, lambda: f64) -> Result<GapReport> {
    let (vf, _) = policy_iteration(op, lambda, crate::constants::POLICY_ITERATION_MAX_ROUNDS)?;
    let sol = green_measure(op, z, lambda)?;
    gap_against_value(op, z, lambda, &vf.values, &sol)
}

pub(crate) fn gap_against_value(
    op: &DiscreteOperator,
    z: usize,
    lambda: f64,
    values: &[f64],
    sol: &LpSolution,
) -> Result<GapReport> {
    let lambda_v_z = lambda * values[z];
    let mut max_active_slack = 0.0f64;
    for &(node, control, w) in &sol.measure.mu1 {
        if w <= 1e-10 {
            continue;
        }
        let row = op.rows[node]
            .iter()
            .find(|r| r.control == control)
            .expect("measure atom names an assembled row");
        let mut slack = (lambda + row.weight_sum) * values[node] - row.cost;
        for &(j, wj) in &row.weights {
            slack -= wj * values[j];
        }
        max_active_slack = max_active_slack.max(slack.abs());
    }
    for &(node, w) in &sol.measure.mu2 {
        if w <= 1e-10 {
            continue;
        }
        let bp = op.grid.boundary_pos[node].expect("mu2 atom on a boundary node");
        match &op.boundary_rows[bp] {
            BoundaryRow::Clamp { value } => {
                max_active_slack = max_active_slack.max((values[node] - value).abs());
            }
            BoundaryRow::Oblique { diag, offdiag, datum } => {
                let mut r = diag * values[node] - datum;
                for &(j, c) in offdiag {
                    r += c * values[j];
                }
                max_active_slack = max_active_slack.max(r.abs());
            }
            BoundaryRow::Constraint => {}
        }
    }
    Ok(GapReport {
        lambda,
        z,
        lambda_v_z,
        objective: sol.objective,
        gap: (lambda_v_z - sol.objective).abs(),
        max_active_slack,
    })
}

/// Shift the mean cost of a measure to `m` by blending with the pushforward
/// onto one expensive control slice. The result keeps the total mass and the
/// node marginal exactly and realizes `<mu, l> = m`; it is measure data, not
/// necessarily a balanced point of any program.
pub fn mass_shift(
    spec: &ProblemSpec,
    grid: &Grid,
    measure: &MeasurePair,
    m: f64,
) -> Result<MeasurePair> {
    let mass: f64 = measure.mu1.iter().map(|&(_, _, w)| w).sum();
    if !(mass > 0.0) {
        return Err(Error::Domain("mass shift needs a measure with positive mass".into()));
    }
    let m0 = measure.cost_pairing(spec, grid);
    if m == m0 {
        return Ok(measure.clone());
    }
    if m < m0 {
        return Err(Error::Coercivity(format!(
            "mass shift only raises the mean cost: target {m} below current {m0}"
        )));
    }
    let dim = grid.dim;
    // The lemma's control: a sampled slice whose cost floor already exceeds
    // the target mean. Scan the marginal's support for the floor.
    let rho = measure.x_marginal(grid.n_nodes);
    let mut alpha1: Option<usize> = None;
    let mut m1_best = f64::NEG_INFINITY;
    for ci in 0..spec.controls.len() {
        let alpha = &spec.controls.samples[ci];
        let mut floor = f64::INFINITY;
        let mut slice_mean = 0.0;
        for (node, &w) in rho.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            let pt = grid.point(node);
            let l = spec.coefficients.cost(&pt[..dim], ci, alpha);
            floor = floor.min(l);
            slice_mean += w * l;
        }
        if floor.is_finite() && floor * mass > m && slice_mean > m1_best {
            alpha1 = Some(ci);
            m1_best = slice_mean;
        }
    }
    let alpha1 = alpha1.ok_or_else(|| {
        Error::Coercivity(format!(
            "no control sample has cost floor above {m}/mass on the measure's support; \
             enlarge the control truncation"
        ))
    })?;
    let m1 = m1_best;
    let t = (m - m0) / (m1 - m0);
    // Blend: (1-t) mu + t nu with nu the pushforward of the node marginal
    // onto the alpha1 slice.
    let mut mu1: Vec<(usize, usize, f64)> = measure
        .mu1
        .iter()
        .map(|&(node, ci, w)| (node, ci, (1.0 - t) * w))
        .collect();
    for (node, &w) in rho.iter().enumerate() {
        if w > 0.0 {
            mu1.push((node, alpha1, t * w));
        }
    }
    // Merge duplicate atoms landing on the same (node, control).
    mu1.sort_unstable_by_key(|&(node, ci, _)| (node, ci));
    let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(mu1.len());
    for (node, ci, w) in mu1 {
        match merged.last_mut() {
            Some((n2, c2, w2)) if *n2 == node && *c2 == ci => *w2 += w,
            _ => merged.push((node, ci, w)),
        }
    }
    let mu1_mass: f64 = merged.iter().map(|&(_, _, w)| w).sum();
    Ok(MeasurePair {
        lambda: measure.lambda,
        z_tag: measure.z_tag,
        bc_kind: measure.bc_kind,
        mu1: merged,
        mu2: measure.mu2.clone(),
        mu1_mass,
        mu2_mass: measure.mu2_mass,
    })
}

/// Membership audit against sampled cone generators.
#[derive(Clone, Debug, Serialize)]
pub struct MembershipReport {
    pub samples: usize,
    pub violations: usize,
    pub min_margin: f64,
    /// Margin of the canonical generator (the problem's own data); near zero
    /// for an optimal measure by complementary slackness.
    pub canonical_slack: f64,
}

/// Smooth low-frequency random field on the grid, sup-bounded by `amp`.
fn random_field(grid: &Grid, rng: &mut ChaCha8Rng, amp: f64) -> Vec<f64> {
    let n = grid.n_nodes;
    let dim = grid.dim;
    let modes = 3usize;
    let mut coeff = Vec::new();
    for _ in 0..dim {
        let per_axis: Vec<(f64, f64)> =
            (0..modes).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        coeff.push(per_axis);
    }
    let cross = if dim == 2 { rng.gen_range(-1.0..1.0) } else { 0.0 };
    let mut raw = vec![0.0f64; n];
    let mut sup = 0.0f64;
    for node in 0..n {
        let pt = grid.point(node);
        let mut v = 0.0;
        let mut s = [0.0f64; 2];
        for d in 0..dim {
            s[d] = (pt[d] - grid.lo[d]) / (grid.hi[d] - grid.lo[d]);
            for (k, &(a, b)) in coeff[d].iter().enumerate() {
                let freq = (k + 1) as f64 * std::f64::consts::PI;
                v += a * (freq * s[d]).sin() + b * (freq * s[d]).cos();
            }
        }
        if dim == 2 {
            v += cross
                * (std::f64::consts::PI * s[0]).sin()
                * (std::f64::consts::PI * s[1]).sin();
        }
        raw[node] = v;
        sup = sup.max(v.abs());
    }
    if sup > 0.0 {
        let f = amp / sup;
        for v in &mut raw {
            *v *= f;
        }
    }
    raw
}

/// Clone the operator with costs `t * l + chi` and boundary data `psi`.
fn patched_op(op: &DiscreteOperator, t: f64, chi: &[f64], psi: &[f64]) -> DiscreteOperator {
    let mut modified = op.clone();
    for (node, rows) in modified.rows.iter_mut().enumerate() {
        for row in rows.iter_mut() {
            row.cost = t * row.cost + chi[node];
        }
    }
    for (bp, brow) in modified.boundary_rows.iter_mut().enumerate() {
        match brow {
            BoundaryRow::Clamp { value } => *value = psi[bp],
            BoundaryRow::Oblique { datum, .. } => *datum = psi[bp],
            BoundaryRow::Constraint => {}
        }
    }
    modified
}

fn sup_costs(op: &DiscreteOperator) -> f64 {
    let mut sup = 0.0f64;
    for rows in &op.rows {
        for row in rows {
            sup = sup.max(row.cost.abs());
        }
    }
    sup
}

fn sup_boundary_data(op: &DiscreteOperator) -> f64 {
    let mut sup = 0.0f64;
    for brow in &op.boundary_rows {
        match brow {
            BoundaryRow::Clamp { value } => sup = sup.max(value.abs()),
            BoundaryRow::Oblique { datum, .. } => sup = sup.max(datum.abs()),
            BoundaryRow::Constraint => {}
        }
    }
    sup
}

/// Pairing of a measure with a generator `(phi, psi)` minus the generator's
/// own value level; nonnegative for every member of the dual cone.
fn generator_margin(
    op: &DiscreteOperator,
    pair: &MeasurePair,
    phi: impl Fn(usize, usize) -> f64,
    psi: &[f64],
    level: f64,
) -> f64 {
    let mut pairing = 0.0;
    for &(node, control, w) in &pair.mu1 {
        pairing += w * phi(node, control);
    }
    // Dirichlet mu2 is stored scaled by 1/lambda; the raw clamp weights pair
    // with the boundary data.
    let scale =
        if pair.bc_kind == BcKind::Dirichlet && pair.lambda > 0.0 { pair.lambda } else { 1.0 };
    if pair.bc_kind != BcKind::StateConstraint && !(pair.bc_kind == BcKind::Dirichlet && pair.lambda == 0.0)
    {
        for &(node, w) in &pair.mu2 {
            let bp = op.grid.boundary_pos[node].expect("mu2 atom on a boundary node");
            pairing += scale * w * psi[bp];
        }
    }
    pairing - level
}

/// Sampled verification that `pair` lies in the dual cone of its program.
///
/// Each sample draws a rescaled generator: `t` log-uniform in [0.1, 10], a
/// smooth field `chi` with `|chi| < t M`, boundary data `psi` with
/// `|psi| < M`, for `M` ten times the data magnitude. For positive discount
/// the generator's level is `lambda u(z)` with `u` the solved value of the
/// modified problem lowered by a positive constant; at zero discount it is
/// the modified program's own optimum. Every margin must clear
/// `-1e-8`; the canonical generator (the problem's own data) is always
/// included and is tight for optimal measures. Atom nonnegativity — the
/// other half of the cone definition — is checked exactly rather than
/// sampled.
pub fn dual_cone_membership(
    pair: &MeasurePair,
    op: &DiscreteOperator,
    z: usize,
    lambda: f64,
    n_samples: usize,
    seed: u64,
) -> Result<MembershipReport> {
    let nb = op.grid.boundary_nodes.len();
    let box_m = MEMBERSHIP_BOX_FACTOR * (1.0 + sup_boundary_data(op) + sup_costs(op));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut min_margin = f64::INFINITY;

    // Nonnegativity is part of the cone definition and is checked exactly,
    // not sampled: a negative atom is a violation with its own margin.
    for w in pair.mu1.iter().map(|&(_, _, w)| w).chain(pair.mu2.iter().map(|&(_, w)| w)) {
        if w < -CONE_MEMBERSHIP_TOL {
            violations += 1;
            min_margin = min_margin.min(w);
        }
    }

    // Row costs and data of the unmodified problem for the canonical element.
    let base_psi: Vec<f64> = op
        .boundary_rows
        .iter()
        .map(|brow| match brow {
            BoundaryRow::Clamp { value } => *value,
            BoundaryRow::Oblique { datum, .. } => *datum,
            BoundaryRow::Constraint => 0.0,
        })
        .collect();
    let base_phi = |node: usize, control: usize| -> f64 {
        op.rows[node]
            .iter()
            .find(|r| r.control == control)
            .map(|r| r.cost)
            .unwrap_or(0.0)
    };

    let canonical_level = if lambda > 0.0 {
        let (vf, _) = policy_iteration(op, lambda, crate::constants::POLICY_ITERATION_MAX_ROUNDS)?;
        lambda * vf.values[z]
    } else {
        solve(&critical_assembly(op, true).lp)?.objective
    };
    let canonical_slack = generator_margin(op, pair, base_phi, &base_psi, canonical_level);
    if canonical_slack < -CONE_MEMBERSHIP_TOL {
        violations += 1;
    }
    min_margin = min_margin.min(canonical_slack);

    for _ in 0..n_samples {
        let t = 10f64.powf(rng.gen_range(-1.0..1.0));
        let chi = random_field(&op.grid, &mut rng, 0.9 * t * box_m);
        let psi_field = random_field(&op.grid, &mut rng, 0.9 * box_m);
        let psi: Vec<f64> =
            (0..nb).map(|bp| psi_field[op.grid.boundary_nodes[bp]]).collect();
        let modified = patched_op(op, t, &chi, &psi);
        let level = if lambda > 0.0 {
            let k = rng.gen_range(0.1..1.0);
            let (vf, _) =
                policy_iteration(&modified, lambda, crate::constants::POLICY_ITERATION_MAX_ROUNDS)?;
            lambda * (vf.values[z] - k)
        } else {
            solve(&critical_assembly(&modified, true).lp)?.objective
        };
        let phi = |node: usize, control: usize| -> f64 {
            modified.rows[node]
                .iter()
                .find(|r| r.control == control)
                .map(|r| r.cost)
                .unwrap_or_else(|| t * base_phi(node, control) + chi[node])
        };
        let margin = generator_margin(op, pair, phi, &psi, level);
        if margin < -CONE_MEMBERSHIP_TOL {
            violations += 1;
        }
        min_margin = min_margin.min(margin);
    }
    Ok(MembershipReport { samples: n_samples, violations, min_margin, canonical_slack })
}

/// Residual of the zero-discount stationarity relations at a measure,
/// including the boundary coupling of its regime. Green measures along a
/// vanishing-discount schedule satisfy `residual <= O(lambda)` and converge
/// to feasible points of the Mather program.
pub fn stationarity_residual(op: &DiscreteOperator, pair: &MeasurePair) -> f64 {
    let n = op.grid.n_nodes;
    let mut residual = vec![0.0f64; n];
    for &(node, control, w) in &pair.mu1 {
        if let Some(row) = op.rows[node].iter().find(|r| r.control == control) {
            residual[node] += w * row.weight_sum;
            for &(j, wj) in &row.weights {
                residual[j] -= w * wj;
            }
        }
    }
    let clamp_scale = if pair.lambda > 0.0 { pair.lambda } else { 0.0 };
    for &(node, w) in &pair.mu2 {
        if let Some(bp) = op.grid.boundary_pos[node] {
            match &op.boundary_rows[bp] {
                // Raw clamp weight couples as the exit flow; the stored
                // Dirichlet weight is scaled by 1/lambda. Pad atoms at zero
                // discount have no stationarity coupling.
                BoundaryRow::Clamp { .. } => residual[node] += clamp_scale * w,
                BoundaryRow::Oblique { diag, offdiag, .. } => {
                    residual[node] += w * diag;
                    for &(j, c) in offdiag {
                        residual[j] += w * c;
                    }
                }
                BoundaryRow::Constraint => {}
            }
        }
    }
    residual.iter().fold(0.0f64, |a, &v| a.max(v.abs()))
}

/// Barrier bound on the Neumann boundary mass: a quadratic barrier whose
/// oblique derivative is at most -1 on the boundary turns the balance
/// identity into `mu2 mass <= 2 lambda sup|eta| + max row value of eta`.
/// Returns `(mass, bound)`.
pub fn neumann_boundary_mass_bound(
    op: &DiscreteOperator,
    pair: &MeasurePair,
) -> Result<(f64, f64)> {
    if op.bc_kind != BcKind::Neumann {
        return Err(Error::Domain("boundary mass bound applies to Neumann problems".into()));
    }
    let grid = &op.grid;
    let dim = grid.dim;
    // eta(x) = -sum_d (x_d - c_d)^2 * 2 / width_d: on each face the inward
    // one-sided difference of eta along the normal is at least 2 - O(h) >= 1,
    // and the oblique rows weight it by gamma.n > 0 plus tangential terms
    // that vanish at face centers of this separable barrier.
    let eta: Vec<f64> = (0..grid.n_nodes)
        .map(|node| {
            let pt = grid.point(node);
            let mut v = 0.0;
            for d in 0..dim {
                let c = 0.5 * (grid.lo[d] + grid.hi[d]);
                let w = grid.hi[d] - grid.lo[d];
                v -= (pt[d] - c) * (pt[d] - c) * 2.0 / w;
            }
            v
        })
        .collect();
    let sup_eta = eta.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    // Oblique rows must push eta down by at least a fixed margin.
    let mut advance = f64::INFINITY;
    for (bp, brow) in op.boundary_rows.iter().enumerate() {
        if let BoundaryRow::Oblique { diag, offdiag, .. } = brow {
            let node = grid.boundary_nodes[bp];
            let mut b_eta = diag * eta[node];
            for &(j, c) in offdiag {
                b_eta += c * eta[j];
            }
            advance = advance.min(-b_eta);
        }
    }
    if !(advance > 0.0) {
        return Err(Error::Build(format!(
            "barrier is not strictly advancing on this grid (margin {advance:.3e}); refine"
        )));
    }
    // Generator ceiling of the barrier over all Bellman rows.
    let mut c1 = 0.0f64;
    for (node, rows) in op.rows.iter().enumerate() {
        for row in rows {
            let mut g = row.weight_sum * eta[node];
            for &(j, w) in &row.weights {
                g -= w * eta[j];
            }
            c1 = c1.max(g);
        }
    }
    let lambda = pair.lambda;
    let bound = (2.0 * lambda * sup_eta + c1) / advance;
    Ok((pair.mu2_mass, bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::POLICY_ITERATION_MAX_ROUNDS;
    use crate::discretize::build_scheme;
    use crate::problem::{constant_cost, eikonal_1d, viscous_quadratic_1d, BcKind};
    use approx::assert_abs_diff_eq;

    #[test]
    fn trivial_green_measure_is_the_discounted_chain() {
        let spec = constant_cost(3.0, BcKind::StateConstraint);
        let op = build_scheme(&spec, &[21]).unwrap();
        let z = op.grid.center_node();
        let sol = green_measure(&op, z, 1.0).unwrap();
        assert_abs_diff_eq!(sol.objective, 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.measure.mu1_mass, 1.0, epsilon = 1e-9);
        // Balance duals replay the value function, here constant 3.
        for &d in &sol.node_duals {
            assert_abs_diff_eq!(d, 3.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn green_optimum_equals_discounted_value_per_regime() {
        for bc in [BcKind::StateConstraint, BcKind::Dirichlet, BcKind::Neumann] {
            let spec = eikonal_1d(1.0, bc);
            let op = build_scheme(&spec, &[41]).unwrap();
            let z = op.grid.center_node();
            let report = duality_gap(&op, z, 0.5).unwrap();
            assert!(report.gap <= 1e-8, "{bc:?}: gap {}", report.gap);
            assert!(report.max_active_slack <= 1e-8, "{bc:?}: slack {}", report.max_active_slack);
            let sol = green_measure(&op, z, 0.5).unwrap();
            match bc {
                BcKind::StateConstraint | BcKind::Neumann => {
                    assert_abs_diff_eq!(sol.measure.mu1_mass, 1.0, epsilon = 1e-8);
                }
                BcKind::Dirichlet => {
                    assert_abs_diff_eq!(
                        sol.measure.mu1_mass + sol.measure.mu2_mass,
                        1.0,
                        epsilon = 1e-8
                    );
                }
            }
        }
    }

    #[test]
    fn boundary_reference_node_still_has_zero_gap() {
        let spec = eikonal_1d(-1.0, BcKind::Dirichlet);
        let op = build_scheme(&spec, &[41]).unwrap();
        let report = duality_gap(&op, 0, 0.25).unwrap();
        assert!(report.gap <= 1e-8, "gap {}", report.gap);
        // At an exit node the measure is the boundary atom itself.
        let sol = green_measure(&op, 0, 0.25).unwrap();
        assert_abs_diff_eq!(sol.measure.mu2_mass, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn mather_dirichlet_regimes_match_the_closed_forms() {
        // m = 1: interior mass one and objective -1 (critical value 1).
        let op = build_scheme(&eikonal_1d(1.0, BcKind::Dirichlet), &[41]).unwrap();
        let sol = mather_measure(&op).unwrap();
        assert_abs_diff_eq!(sol.objective, -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.measure.mu1_mass, 1.0, epsilon = 1e-9);
        // m = -1: all mass pads away and the critical value is 0.
        let op = build_scheme(&eikonal_1d(-1.0, BcKind::Dirichlet), &[41]).unwrap();
        let sol = mather_measure(&op).unwrap();
        assert_abs_diff_eq!(sol.objective, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.measure.mu2_mass, 1.0, epsilon = 1e-9);
        assert!(sol.measure.mu1_mass <= 1e-9);
    }

    #[test]
    fn mather_neumann_recovers_the_running_cost_floor() {
        for m in [-1.0, 0.0, 1.0] {
            let op = build_scheme(&eikonal_1d(m, BcKind::Neumann), &[41]).unwrap();
            let sol = mather_measure(&op).unwrap();
            // Critical value m means objective -m.
            assert_abs_diff_eq!(sol.objective, -m, epsilon = 1e-9);
            assert_abs_diff_eq!(sol.measure.mu1_mass, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn mather_state_constraint_constant_cost() {
        let op = build_scheme(&constant_cost(3.0, BcKind::StateConstraint), &[21]).unwrap();
        let sol = mather_measure(&op).unwrap();
        assert_abs_diff_eq!(sol.objective, 3.0, epsilon = 1e-10);
    }

    #[test]
    fn stationary_kernel_sees_through_an_exponentially_slow_drain() {
        // Every control in the viscous benchmark diffuses toward the
        // absorbing boundary, so no set of nodes is closed: the kernel must
        // be empty even though the drain rate under strong inward drift is
        // far below floating point resolution.
        let op = build_scheme(&viscous_quadratic_1d(BcKind::Dirichlet), &[41]).unwrap();
        assert!(stationary_kernel(&op).iter().all(|&a| !a));

        // First-order motion can stand still (the zero control has an empty
        // stencil), so every node with rows survives.
        let op = build_scheme(&eikonal_1d(-1.0, BcKind::Dirichlet), &[41]).unwrap();
        let kernel = stationary_kernel(&op);
        for (node, rows) in op.rows.iter().enumerate() {
            assert_eq!(kernel[node], !rows.is_empty(), "node {node}");
        }
    }

    #[test]
    fn mass_shift_keeps_mass_and_marginal_exactly() {
        let spec = viscous_quadratic_1d(BcKind::Dirichlet);
        let op = build_scheme(&spec, &[31]).unwrap();
        let z = op.grid.center_node();
        let sol = green_measure(&op, z, 0.5).unwrap();
        let pair = &sol.measure;
        let m0 = pair.cost_pairing(&spec, &op.grid);

        // Feasible target: halfway to the cheapest expensive-slice bound.
        let mass = pair.mu1_mass;
        let rho = pair.x_marginal(op.grid.n_nodes);
        let mut best_floor = f64::NEG_INFINITY;
        for ci in 0..spec.controls.len() {
            let mut floor = f64::INFINITY;
            for (node, &w) in rho.iter().enumerate() {
                if w > 0.0 {
                    let pt = op.grid.point(node);
                    floor = floor
                        .min(spec.coefficients.cost(&pt[..1], ci, &spec.controls.samples[ci]));
                }
            }
            best_floor = best_floor.max(floor * mass);
        }
        let m = 0.5 * (m0 + best_floor);
        assert!(m > m0);
        let shifted = mass_shift(&spec, &op.grid, pair, m).unwrap();
        assert!((shifted.mu1_mass - mass).abs() <= 1e-13);
        assert!((shifted.cost_pairing(&spec, &op.grid) - m).abs() <= 1e-13);
        let rho2 = shifted.x_marginal(op.grid.n_nodes);
        for node in 0..op.grid.n_nodes {
            assert!((rho[node] - rho2[node]).abs() <= 1e-13, "marginal moved at node {node}");
        }
    }

    #[test]
    fn mass_shift_at_current_mean_returns_the_input() {
        let spec = viscous_quadratic_1d(BcKind::Dirichlet);
        let op = build_scheme(&spec, &[31]).unwrap();
        let sol = green_measure(&op, op.grid.center_node(), 0.5).unwrap();
        let m0 = sol.measure.cost_pairing(&spec, &op.grid);
        let same = mass_shift(&spec, &op.grid, &sol.measure, m0).unwrap();
        assert_eq!(same.mu1.len(), sol.measure.mu1.len());
        for (a, b) in same.mu1.iter().zip(&sol.measure.mu1) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mass_shift_on_a_point_mass_splits_between_two_atoms() {
        let spec = viscous_quadratic_1d(BcKind::Dirichlet);
        let op = build_scheme(&spec, &[31]).unwrap();
        let node = op.grid.center_node();
        let ci0 = spec.controls.samples.iter().position(|s| s[0] == 0.0).unwrap();
        let pt = op.grid.point(node);
        let l0 = spec.coefficients.cost(&pt[..1], ci0, &spec.controls.samples[ci0]);
        let pair = MeasurePair {
            lambda: 0.0,
            z_tag: None,
            bc_kind: BcKind::Dirichlet,
            mu1: vec![(node, ci0, 1.0)],
            mu2: vec![],
            mu1_mass: 1.0,
            mu2_mass: 0.0,
        };
        // Slice cost of the most expensive control at this node.
        let ci1 = spec
            .controls
            .samples
            .iter()
            .position(|s| s[0] == 2.0)
            .expect("extreme sample present");
        let l1 = spec.coefficients.cost(&pt[..1], ci1, &spec.controls.samples[ci1]);
        let m = 0.5 * (l0 + l1);
        let shifted = mass_shift(&spec, &op.grid, &pair, m).unwrap();
        assert_eq!(shifted.mu1.len(), 2);
        assert!((shifted.cost_pairing(&spec, &op.grid) - m).abs() <= 1e-13);
        // t = 1/2 exactly, split between the two atoms at the same node.
        for &(n2, _, w) in &shifted.mu1 {
            assert_eq!(n2, node);
            assert!((w - 0.5).abs() <= 1e-13);
        }
    }

    #[test]
    fn mass_shift_without_expensive_controls_reports_coercivity() {
        // Constant cost in the control: no slice can raise the mean.
        let spec = eikonal_1d(1.0, BcKind::StateConstraint);
        let op = build_scheme(&spec, &[21]).unwrap();
        let sol = green_measure(&op, op.grid.center_node(), 0.5).unwrap();
        let err = mass_shift(&spec, &op.grid, &sol.measure, 5.0).unwrap_err();
        assert!(matches!(err, Error::Coercivity(_)));
    }

    #[test]
    fn green_measures_pass_the_cone_audit() {
        let spec = eikonal_1d(1.0, BcKind::StateConstraint);
        let op = build_scheme(&spec, &[31]).unwrap();
        let z = op.grid.center_node();
        let sol = green_measure(&op, z, 0.5).unwrap();
        let report = dual_cone_membership(&sol.measure, &op, z, 0.5, 16, 7).unwrap();
        assert_eq!(report.violations, 0, "min margin {}", report.min_margin);
        assert!(report.canonical_slack.abs() <= 1e-8);
    }

    #[test]
    fn mather_measures_pass_the_cone_audit() {
        let spec = eikonal_1d(1.0, BcKind::Dirichlet);
        let op = build_scheme(&spec, &[31]).unwrap();
        let sol = mather_measure(&op).unwrap();
        let report = dual_cone_membership(&sol.measure, &op, 0, 0.0, 12, 11).unwrap();
        assert_eq!(report.violations, 0, "min margin {}", report.min_margin);
        assert!(report.canonical_slack.abs() <= 1e-8);
    }

    #[test]
    fn corrupted_measure_fails_the_cone_audit() {
        let spec = eikonal_1d(1.0, BcKind::StateConstraint);
        let op = build_scheme(&spec, &[31]).unwrap();
        let z = op.grid.center_node();
        let sol = green_measure(&op, z, 0.5).unwrap();
        let mut bad = sol.measure.clone();
        // Negate the heaviest atom.
        let imax = (0..bad.mu1.len())
            .max_by(|&a, &b| bad.mu1[a].2.total_cmp(&bad.mu1[b].2))
            .unwrap();
        bad.mu1[imax].2 = -bad.mu1[imax].2;
        let report = dual_cone_membership(&bad, &op, z, 0.5, 24, 7).unwrap();
        assert!(report.violations > 0, "corruption went unnoticed: {report:?}");
    }

    #[test]
    fn corrupted_balance_row_breaks_the_duality_gap() {
        let spec = eikonal_1d(1.0, BcKind::StateConstraint);
        let op = build_scheme(&spec, &[41]).unwrap();
        let z = op.grid.center_node();
        let lambda = 0.5;
        let mut asm = green_assembly(&op, z, lambda);
        asm.lp.set_rhs(z, lambda * 1.5);
        let out = solve(&asm.lp).unwrap();
        let (vf, _) = policy_iteration(&op, lambda, POLICY_ITERATION_MAX_ROUNDS).unwrap();
        let gap = (lambda * vf.values[z] - out.objective).abs();
        assert!(gap > 1e-4, "corruption left gap {gap}");
    }

    #[test]
    fn green_measures_are_nearly_stationary_for_small_discounts() {
        let spec = eikonal_1d(1.0, BcKind::StateConstraint);
        let op = build_scheme(&spec, &[41]).unwrap();
        let lambda = 0.01;
        let sol = green_measure(&op, op.grid.center_node(), lambda).unwrap();
        let res = stationarity_residual(&op, &sol.measure);
        assert!(res <= 10.0 * lambda, "stationarity residual {res}");
    }

    #[test]
    fn neumann_boundary_mass_obeys_the_barrier_bound() {
        let spec = eikonal_1d(0.0, BcKind::Neumann);
        let op = build_scheme(&spec, &[41]).unwrap();
        let sol = green_measure(&op, op.grid.center_node(), 0.1).unwrap();
        let (mass, bound) = neumann_boundary_mass_bound(&op, &sol.measure).unwrap();
        assert!(mass <= bound + 1e-6, "mass {mass} exceeds barrier bound {bound}");
    }
}
