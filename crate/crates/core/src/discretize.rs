//! Monotone finite-difference schemes on interval and rectangle grids.
//!
//! `build_scheme` turns a [`ProblemSpec`] into a [`DiscreteOperator`]: for
//! every node and control sample a stencil row with nonnegative off-diagonal
//! weights (central differences for diffusion, upwind for drift, a 7-point
//! split for 2D cross terms), plus one boundary row per boundary node whose
//! form depends on the regime. Monotonicity is enforced at build time; the
//! audit and consistency probes are separate so tests can exercise them on
//! hand-built operators.
//!
//! Boundary rows:
//!
//! * state constraint — no datum; the boundary node keeps the Bellman rows of
//!   the controls whose inward-restricted stencil needs no exterior neighbor
//!   (a node where no control survives fails the build).
//! * Dirichlet — a clamp `u_i <= g_i` alongside the surviving inward Bellman
//!   rows; the discrete update takes `u_i = min(g_i, Bellman value)`, which
//!   realizes the relaxed (comparison-compatible) boundary condition.
//! * Neumann — a one-sided oblique difference `gamma . D_h u = g`, consistent
//!   of first order, with positive diagonal and nonpositive off-diagonal.

use crate::constants::{BOUNDARY_DIFFUSION_TOL, MONOTONICITY_TOL};
use crate::error::{Error, Result};
use crate::problem::{BcKind, Domain, ProblemSpec, SymMat};
use serde::Serialize;
use serde_json::json;

/// Uniform lattice over the domain closure. One-dimensional grids use only
/// the first axis (`shape[1] == 1`).
#[derive(Clone, Debug, Serialize)]
pub struct Grid {
    pub dim: usize,
    pub shape: [usize; 2],
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub h: [f64; 2],
    pub n_nodes: usize,
    /// Boundary node indices in increasing node order.
    pub boundary_nodes: Vec<usize>,
    /// For each node, its position in `boundary_nodes` (or `None`).
    pub boundary_pos: Vec<Option<usize>>,
    /// Per boundary position: face signs per axis (-1 lo face, +1 hi face, 0 off-face).
    pub faces: Vec<[i8; 2]>,
    /// Per boundary position: unit outward normal (diagonal at 2D corners).
    pub normals: Vec<[f64; 2]>,
}

impl Grid {
    pub fn new(domain: &Domain, shape: &[usize]) -> Result<Self> {
        let dim = domain.dim();
        if shape.len() != dim {
            return Err(Error::Build(format!(
                "shape has {} axes but the domain has {dim}",
                shape.len()
            )));
        }
        for (d, &s) in shape.iter().enumerate() {
            if s < 3 {
                return Err(Error::Build(format!(
                    "grid too coarse: axis {d} has {s} nodes, need at least 3"
                )));
            }
        }
        let mut sh = [1usize; 2];
        let mut lo = [0.0f64; 2];
        let mut hi = [0.0f64; 2];
        let mut h = [0.0f64; 2];
        for d in 0..dim {
            sh[d] = shape[d];
            lo[d] = domain.lo(d);
            hi[d] = domain.hi(d);
            h[d] = (hi[d] - lo[d]) / ((sh[d] - 1) as f64);
            if !(h[d] > 0.0) {
                return Err(Error::Build(format!("axis {d} has nonpositive width")));
            }
        }
        let n_nodes = sh[0] * sh[1];
        let mut boundary_nodes = Vec::new();
        let mut boundary_pos = vec![None; n_nodes];
        let mut faces = Vec::new();
        let mut normals = Vec::new();
        for node in 0..n_nodes {
            let ix = node % sh[0];
            let iy = node / sh[0];
            let mut face = [0i8; 2];
            if ix == 0 {
                face[0] = -1;
            } else if ix == sh[0] - 1 {
                face[0] = 1;
            }
            if dim == 2 {
                if iy == 0 {
                    face[1] = -1;
                } else if iy == sh[1] - 1 {
                    face[1] = 1;
                }
            }
            if face[0] != 0 || face[1] != 0 {
                boundary_pos[node] = Some(boundary_nodes.len());
                boundary_nodes.push(node);
                faces.push(face);
                let mut n = [face[0] as f64, face[1] as f64];
                let len = (n[0] * n[0] + n[1] * n[1]).sqrt();
                n[0] /= len;
                n[1] /= len;
                normals.push(n);
            }
        }
        Ok(Grid { dim, shape: sh, lo, hi, h, n_nodes, boundary_nodes, boundary_pos, faces, normals })
    }

    /// Coordinates of a node; only the first `dim` entries are meaningful.
    pub fn point(&self, node: usize) -> [f64; 2] {
        let ix = node % self.shape[0];
        let iy = node / self.shape[0];
        [self.lo[0] + self.h[0] * ix as f64, self.lo[1] + self.h[1] * iy as f64]
    }

    /// Neighbor one step along `axis` in direction `dir` (+1/-1), if inside.
    pub fn neighbor(&self, node: usize, axis: usize, dir: i64) -> Option<usize> {
        let ix = (node % self.shape[0]) as i64;
        let iy = (node / self.shape[0]) as i64;
        let (jx, jy) = if axis == 0 { (ix + dir, iy) } else { (ix, iy + dir) };
        if jx < 0 || jy < 0 || jx >= self.shape[0] as i64 || jy >= self.shape[1] as i64 {
            None
        } else {
            Some((jy as usize) * self.shape[0] + jx as usize)
        }
    }

    fn diag_neighbor(&self, node: usize, dx: i64, dy: i64) -> Option<usize> {
        let ix = (node % self.shape[0]) as i64 + dx;
        let iy = (node / self.shape[0]) as i64 + dy;
        if ix < 0 || iy < 0 || ix >= self.shape[0] as i64 || iy >= self.shape[1] as i64 {
            None
        } else {
            Some((iy as usize) * self.shape[0] + ix as usize)
        }
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary_pos[node].is_some()
    }

    pub fn h_max(&self) -> f64 {
        if self.dim == 1 {
            self.h[0]
        } else {
            self.h[0].max(self.h[1])
        }
    }

    /// Node nearest the domain centroid: the default reference node.
    pub fn center_node(&self) -> usize {
        let mut idx = [0usize; 2];
        for d in 0..self.dim {
            idx[d] = (self.shape[d] - 1) / 2;
        }
        idx[1] * self.shape[0] + idx[0]
    }
}

/// One Bellman stencil row: the discrete generator for one control at one
/// node, `sum_j w_j (u_i - u_j) - cost`, with all `w_j >= 0`.
#[derive(Clone, Debug, Serialize)]
pub struct StencilRow {
    /// Index into the control sample list.
    pub control: usize,
    /// Running cost `L(x_i, alpha)`.
    pub cost: f64,
    /// `(neighbor node, weight)`, self excluded.
    pub weights: Vec<(usize, f64)>,
    /// Cached `sum_j w_j`.
    pub weight_sum: f64,
}

/// Boundary row attached to a boundary node.
#[derive(Clone, Debug, Serialize)]
pub enum BoundaryRow {
    /// State constraint: the node is governed by its (restricted) Bellman rows.
    Constraint,
    /// Dirichlet clamp `u_i <= value`, taken with `min` against the Bellman rows.
    Clamp { value: f64 },
    /// Oblique one-sided relation `diag * u_i + sum_k c_k u_k = datum`
    /// with `diag > 0` and every `c_k <= 0`.
    Oblique { diag: f64, offdiag: Vec<(usize, f64)>, datum: f64 },
}

/// The assembled monotone scheme.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub grid: Grid,
    pub bc_kind: BcKind,
    pub n_controls: usize,
    /// Bellman rows per node. Interior nodes carry one row per control;
    /// boundary nodes carry the surviving inward-restricted rows (empty for
    /// Neumann nodes and for Dirichlet nodes with no admissible control).
    pub rows: Vec<Vec<StencilRow>>,
    /// One row per entry of `grid.boundary_nodes`.
    pub boundary_rows: Vec<BoundaryRow>,
}

impl DiscreteOperator {
    /// Maximum mesh width, the `h` in mesh-dependent tolerances.
    pub fn h(&self) -> f64 {
        self.grid.h_max()
    }

    /// Total number of Bellman rows (LP variables of the mu_1 block).
    pub fn n_bellman_rows(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// Sparse-triplet JSON document: weight triplets `(node, control, neighbor,
    /// w)`, cost pairs `(node, control, cost)`, and boundary rows.
    pub fn to_json(&self) -> serde_json::Value {
        let mut triplets = Vec::new();
        let mut costs = Vec::new();
        for (node, rows) in self.rows.iter().enumerate() {
            for row in rows {
                costs.push(json!([node, row.control, row.cost]));
                for &(j, w) in &row.weights {
                    triplets.push(json!([node, row.control, j, w]));
                }
            }
        }
        let boundary: Vec<serde_json::Value> = self
            .grid
            .boundary_nodes
            .iter()
            .zip(&self.boundary_rows)
            .map(|(&node, row)| match row {
                BoundaryRow::Constraint => json!({"node": node, "kind": "state_constraint"}),
                BoundaryRow::Clamp { value } => {
                    json!({"node": node, "kind": "dirichlet", "value": value})
                }
                BoundaryRow::Oblique { diag, offdiag, datum } => json!({
                    "node": node, "kind": "neumann", "diag": diag,
                    "offdiag": offdiag, "datum": datum,
                }),
            })
            .collect();
        json!({
            "dim": self.grid.dim,
            "shape": self.grid.shape[..self.grid.dim],
            "lo": self.grid.lo[..self.grid.dim],
            "hi": self.grid.hi[..self.grid.dim],
            "h": self.grid.h[..self.grid.dim],
            "bc_kind": format!("{}", self.bc_kind),
            "n_nodes": self.grid.n_nodes,
            "n_controls": self.n_controls,
            "weights": triplets,
            "costs": costs,
            "boundary_rows": boundary,
        })
    }
}

/// Why a control was rejected at a boundary node.
enum Rejection {
    /// Normal (or cross) diffusion needs an exterior neighbor.
    Diffusion(f64),
    /// Drift points out of the domain.
    OutwardDrift(usize),
}

/// Try to build the stencil row for `(node, control)` using only neighbors
/// that exist. `face` holds the node's face signs ([0,0] for interior).
fn try_build_row(
    grid: &Grid,
    face: [i8; 2],
    node: usize,
    control: usize,
    a: &SymMat,
    b: &[f64],
    cost: f64,
) -> std::result::Result<StencilRow, Rejection> {
    let dim = grid.dim;
    let mut weights: Vec<(usize, f64)> = Vec::with_capacity(2 * dim + 2);
    let mut push = |j: usize, w: f64| {
        if w != 0.0 {
            weights.push((j, w));
        }
    };

    let a12 = if dim == 2 { a.a12 } else { 0.0 };
    let on_face = face[0] != 0 || face[1] != 0;

    // Cross-diffusion needs all four diagonal neighbors on one diagonal; any
    // face position removes at least one of them.
    if a12.abs() > BOUNDARY_DIFFUSION_TOL && on_face {
        return Err(Rejection::Diffusion(a12.abs()));
    }

    // Axis diffusion, reduced by the cross-term share (7-point split).
    for d in 0..dim {
        let add = if d == 0 { a.a11 } else { a.a22 };
        let share = if dim == 2 { a12.abs() / (grid.h[0] * grid.h[1]) } else { 0.0 };
        let w_axis = add / (grid.h[d] * grid.h[d]) - share;
        if face[d] != 0 {
            // One-sided node: a second difference is impossible, so the
            // normal diffusion must vanish.
            if add.abs() > BOUNDARY_DIFFUSION_TOL {
                return Err(Rejection::Diffusion(add.abs()));
            }
            continue;
        }
        if w_axis != 0.0 {
            // Negative axis weight (cross term dominates) is a monotonicity
            // failure, reported by the caller with full context.
            push(grid.neighbor(node, d, 1).unwrap(), w_axis);
            push(grid.neighbor(node, d, -1).unwrap(), w_axis);
        }
    }

    // Diagonal cross-term weights (interior only; faces were rejected above).
    if a12.abs() > 0.0 && dim == 2 {
        let w_diag = a12.abs() / (grid.h[0] * grid.h[1]);
        let (d1, d2) = if a12 > 0.0 { ((1, 1), (-1, -1)) } else { ((1, -1), (-1, 1)) };
        push(grid.diag_neighbor(node, d1.0, d1.1).unwrap(), w_diag);
        push(grid.diag_neighbor(node, d2.0, d2.1).unwrap(), w_diag);
    }

    // Upwind drift.
    for d in 0..dim {
        let bd = b[d];
        if bd.abs() <= 1e-14 {
            continue;
        }
        // Drift bd > 0 moves along +d, so the upwind neighbor is +d.
        let dir: i64 = if bd > 0.0 { 1 } else { -1 };
        match grid.neighbor(node, d, dir) {
            Some(j) => push(j, bd.abs() / grid.h[d]),
            None => return Err(Rejection::OutwardDrift(d)),
        }
    }

    // Merge duplicate neighbors (axis + diagonal contributions never collide,
    // but drift and diffusion on the same neighbor do).
    weights.sort_unstable_by_key(|&(j, _)| j);
    let mut merged: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
    for (j, w) in weights {
        match merged.last_mut() {
            Some((last_j, last_w)) if *last_j == j => *last_w += w,
            _ => merged.push((j, w)),
        }
    }
    let weight_sum: f64 = merged.iter().map(|&(_, w)| w).sum();
    Ok(StencilRow { control, cost, weights: merged, weight_sum })
}

/// Assemble the monotone scheme for `spec` on a `shape` lattice.
pub fn build_scheme(spec: &ProblemSpec, shape: &[usize]) -> Result<DiscreteOperator> {
    let grid = Grid::new(&spec.domain, shape)?;
    let dim = grid.dim;
    let kind = spec.boundary.kind();
    let mut rows: Vec<Vec<StencilRow>> = Vec::with_capacity(grid.n_nodes);
    let mut boundary_rows: Vec<BoundaryRow> = Vec::with_capacity(grid.boundary_nodes.len());

    for node in 0..grid.n_nodes {
        let pt = grid.point(node);
        let x = &pt[..dim];
        let face = match grid.boundary_pos[node] {
            Some(bp) => grid.faces[bp],
            None => [0, 0],
        };
        let on_boundary = face != [0, 0];

        // Neumann boundary nodes are governed by the oblique relation alone.
        if on_boundary && kind == BcKind::Neumann {
            rows.push(Vec::new());
            continue;
        }

        let mut node_rows = Vec::with_capacity(spec.controls.len());
        for (ci, alpha) in spec.controls.samples.iter().enumerate() {
            let a = spec.coefficients.diffusion(x, ci, alpha);
            let b = spec.coefficients.drift(x, ci, alpha);
            let cost = spec.coefficients.cost(x, ci, alpha);
            if !cost.is_finite() || !b.iter().all(|v| v.is_finite()) {
                return Err(Error::Build(format!(
                    "non-finite coefficient at node {node}, control {ci}"
                )));
            }
            match try_build_row(&grid, face, node, ci, &a, &b, cost) {
                Ok(row) => {
                    // Reject negative weights with full context.
                    if let Some(&(j, w)) =
                        row.weights.iter().find(|&&(_, w)| w < MONOTONICITY_TOL)
                    {
                        return Err(Error::Monotonicity { node, control: ci, neighbor: j, weight: w });
                    }
                    node_rows.push(row);
                }
                Err(Rejection::Diffusion(ann)) => {
                    if kind == BcKind::StateConstraint {
                        return Err(Error::Build(format!(
                            "state constraint requires vanishing normal diffusion on the boundary; \
                             node {node} (x = {:?}), control {ci} has normal diffusion {ann:.3e}",
                            x
                        )));
                    }
                    // Dirichlet: the control is dropped; the clamp takes over.
                }
                Err(Rejection::OutwardDrift(_axis)) => {
                    // Outward drift cannot be realized inside the closure;
                    // drop the control at this node (both SC and Dirichlet).
                }
            }
        }
        if on_boundary && kind == BcKind::StateConstraint && node_rows.is_empty() {
            return Err(Error::Build(format!(
                "no admissible control at constrained boundary node {node} (x = {:?}): \
                 every sampled drift exits the domain",
                &grid.point(node)[..dim]
            )));
        }
        rows.push(node_rows);
    }

    for (bp, &node) in grid.boundary_nodes.iter().enumerate() {
        let pt = grid.point(node);
        let x = &pt[..dim];
        match kind {
            BcKind::StateConstraint => boundary_rows.push(BoundaryRow::Constraint),
            BcKind::Dirichlet => {
                let value = spec.boundary.g_at(x);
                if !value.is_finite() {
                    return Err(Error::Build(format!("non-finite Dirichlet datum at node {node}")));
                }
                boundary_rows.push(BoundaryRow::Clamp { value });
            }
            BcKind::Neumann => {
                boundary_rows.push(build_oblique_row(&grid, spec, bp, node)?);
            }
        }
    }

    Ok(DiscreteOperator { grid, bc_kind: kind, n_controls: spec.controls.len(), rows, boundary_rows })
}

/// One-sided monotone discretization of `gamma . Du = g` at boundary node
/// `node`. On each face axis the inward difference is forced; obliqueness
/// (`gamma . n > 0`) makes it monotone there. Tangential axes upwind on the
/// sign of `gamma`. At a 2D corner both axes are forced, which realizes the
/// averaged pair of one-sided face relations.
fn build_oblique_row(
    grid: &Grid,
    spec: &ProblemSpec,
    bp: usize,
    node: usize,
) -> Result<BoundaryRow> {
    let dim = grid.dim;
    let pt = grid.point(node);
    let x = &pt[..dim];
    let face = grid.faces[bp];
    let normal = &grid.normals[bp];
    let gamma = spec.boundary.gamma_at(x, &normal[..dim]);
    let datum = spec.boundary.g_at(x);
    if !datum.is_finite() || gamma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Build(format!("non-finite Neumann data at node {node}")));
    }
    let gn: f64 = gamma.iter().zip(normal.iter()).map(|(g, n)| g * n).sum();
    if gn <= 0.0 {
        return Err(Error::Build(format!(
            "oblique direction not outward at node {node} (x = {:?}): gamma.n = {gn:.6}",
            x
        )));
    }
    let mut diag = 0.0;
    let mut offdiag: Vec<(usize, f64)> = Vec::new();
    for d in 0..dim {
        let gd = gamma[d];
        if gd.abs() <= 1e-14 {
            continue;
        }
        // Side with an interior neighbor: forced on a face, upwind otherwise.
        let dir: i64 = match face[d] {
            -1 => 1,
            1 => -1,
            _ => {
                if gd > 0.0 {
                    -1
                } else {
                    1
                }
            }
        };
        // gamma_d * one-sided difference; the diagonal contribution must be
        // positive or the row is not monotone.
        let contrib = -gd * dir as f64 / grid.h[d];
        if contrib <= 0.0 {
            return Err(Error::Build(format!(
                "oblique direction not realizable monotonically at corner node {node} \
                 (x = {:?}): component {d} of gamma points outward along a forced axis",
                x
            )));
        }
        let j = grid.neighbor(node, d, dir).expect("direction chosen toward the interior");
        diag += contrib;
        offdiag.push((j, -contrib));
    }
    if diag <= 1e-14 {
        return Err(Error::Build(format!(
            "oblique direction degenerate (tangential) at node {node}"
        )));
    }
    Ok(BoundaryRow::Oblique { diag, offdiag, datum })
}

/// Monotonicity audit report.
#[derive(Clone, Debug, Serialize)]
pub struct MonotonicityReport {
    /// Smallest off-diagonal Bellman weight found (>= 0 when monotone).
    pub min_weight: f64,
    /// Largest row weight sum, the stiffness that fixes value-iteration steps.
    pub max_weight_sum: f64,
    /// Number of Bellman rows scanned.
    pub rows_scanned: usize,
}

/// Re-scan an operator (for instance a hand-modified one) for monotonicity:
/// every Bellman weight nonnegative, every oblique row with positive diagonal
/// and nonpositive off-diagonals. Returns the worst offender as an error.
pub fn check_monotonicity(op: &DiscreteOperator) -> Result<MonotonicityReport> {
    let mut min_weight = f64::INFINITY;
    let mut max_weight_sum = 0.0f64;
    let mut rows_scanned = 0usize;
    for (node, rows) in op.rows.iter().enumerate() {
        for row in rows {
            rows_scanned += 1;
            max_weight_sum = max_weight_sum.max(row.weight_sum);
            for &(j, w) in &row.weights {
                if w < min_weight {
                    min_weight = w;
                }
                if w < MONOTONICITY_TOL {
                    return Err(Error::Monotonicity { node, control: row.control, neighbor: j, weight: w });
                }
            }
        }
    }
    for (bp, brow) in op.boundary_rows.iter().enumerate() {
        if let BoundaryRow::Oblique { diag, offdiag, .. } = brow {
            let node = op.grid.boundary_nodes[bp];
            if *diag <= 0.0 {
                return Err(Error::Build(format!(
                    "oblique row at node {node} has nonpositive diagonal {diag:.3e}"
                )));
            }
            for &(j, c) in offdiag {
                if c > -MONOTONICITY_TOL {
                    continue;
                }
                if c > 0.0 {
                    return Err(Error::Monotonicity { node, control: usize::MAX, neighbor: j, weight: -c });
                }
            }
        }
    }
    if !min_weight.is_finite() {
        min_weight = 0.0;
    }
    Ok(MonotonicityReport { min_weight, max_weight_sum, rows_scanned })
}

/// A smooth test function with exact derivatives, for consistency probes.
pub struct SmoothTest {
    pub f: Box<dyn Fn(&[f64]) -> f64>,
    pub grad: Box<dyn Fn(&[f64]) -> Vec<f64>>,
    pub hess: Box<dyn Fn(&[f64]) -> SymMat>,
}

impl SmoothTest {
    /// `sin(k x)` (1D) or `sin(k x) sin(k y)` (2D), a generic smooth probe.
    pub fn sinusoid(dim: usize, k: f64) -> Self {
        if dim == 1 {
            SmoothTest {
                f: Box::new(move |x| (k * x[0]).sin()),
                grad: Box::new(move |x| vec![k * (k * x[0]).cos()]),
                hess: Box::new(move |x| SymMat::scalar_1d(-k * k * (k * x[0]).sin())),
            }
        } else {
            SmoothTest {
                f: Box::new(move |x| (k * x[0]).sin() * (k * x[1]).sin()),
                grad: Box::new(move |x| {
                    vec![
                        k * (k * x[0]).cos() * (k * x[1]).sin(),
                        k * (k * x[0]).sin() * (k * x[1]).cos(),
                    ]
                }),
                hess: Box::new(move |x| {
                    SymMat::full_2d(
                        -k * k * (k * x[0]).sin() * (k * x[1]).sin(),
                        -k * k * (k * x[0]).sin() * (k * x[1]).sin(),
                        k * k * (k * x[0]).cos() * (k * x[1]).cos(),
                    )
                }),
            }
        }
    }
}

/// Largest truncation error of the discrete generator against the exact
/// `-tr(a D^2 phi) - b . D phi` over interior nodes and all controls.
/// Decays like O(h) for upwinded drift (O(h^2) when only diffusion acts).
pub fn consistency_probe(op: &DiscreteOperator, spec: &ProblemSpec, test: &SmoothTest) -> f64 {
    let grid = &op.grid;
    let dim = grid.dim;
    let phi: Vec<f64> = (0..grid.n_nodes)
        .map(|node| {
            let pt = grid.point(node);
            (test.f)(&pt[..dim])
        })
        .collect();
    let mut worst = 0.0f64;
    for node in 0..grid.n_nodes {
        if grid.is_boundary(node) {
            continue;
        }
        let pt = grid.point(node);
        let x = &pt[..dim];
        let grad = (test.grad)(x);
        let hess = (test.hess)(x);
        for row in &op.rows[node] {
            let alpha = &spec.controls.samples[row.control];
            let a = spec.coefficients.diffusion(x, row.control, alpha);
            let b = spec.coefficients.drift(x, row.control, alpha);
            let mut discrete = row.weight_sum * phi[node];
            for &(j, w) in &row.weights {
                discrete -= w * phi[j];
            }
            let mut exact = -a.ddot(&hess);
            for d in 0..dim {
                exact -= b[d] * grad[d];
            }
            worst = worst.max((discrete - exact).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{
        constant_cost, eikonal_1d, viscous_quadratic_1d, BcKind, BoundaryCondition, Coefficients,
        ControlSet, ProblemSpec,
    };
    use approx::assert_abs_diff_eq;

    fn control_index(spec: &ProblemSpec, alpha: f64) -> usize {
        spec.controls
            .samples
            .iter()
            .position(|s| (s[0] - alpha).abs() < 1e-12)
            .expect("control sample present")
    }

    #[test]
    fn eikonal_interior_stencil_by_hand() {
        // shape 5 on (-1,1): h = 0.5. Control alpha = 1 has drift b = -1,
        // so the upwind weight is 1/h toward the left neighbor; cost is -m.
        let spec = eikonal_1d(1.0, BcKind::StateConstraint);
        let op = build_scheme(&spec, &[5]).unwrap();
        let ci = control_index(&spec, 1.0);
        let row = op.rows[2].iter().find(|r| r.control == ci).unwrap();
        assert_eq!(row.weights, vec![(1, 2.0)]);
        assert_abs_diff_eq!(row.cost, -1.0, epsilon = 0.0);
        // alpha = -1 drifts right.
        let ci = control_index(&spec, -1.0);
        let row = op.rows[2].iter().find(|r| r.control == ci).unwrap();
        assert_eq!(row.weights, vec![(3, 2.0)]);
    }

    #[test]
    fn viscous_interior_stencil_by_hand() {
        // shape 11 on (-1,1): h = 0.2. Control q = 0.5: b = -0.5 upwinds left,
        // diffusion eps/h^2 = 0.25 acts both ways:
        // w[i-1] = 0.25 + 2.5, w[i+1] = 0.25.
        let spec = viscous_quadratic_1d(BcKind::Dirichlet);
        let op = build_scheme(&spec, &[11]).unwrap();
        let ci = control_index(&spec, 0.5);
        let row = op.rows[5].iter().find(|r| r.control == ci).unwrap();
        let w: std::collections::BTreeMap<usize, f64> = row.weights.iter().cloned().collect();
        assert_abs_diff_eq!(w[&4], 2.75, epsilon = 1e-12);
        assert_abs_diff_eq!(w[&6], 0.25, epsilon = 1e-12);
        let x = op.grid.point(5)[0];
        assert_abs_diff_eq!(row.cost, 0.125 + (std::f64::consts::PI * x).cos(), epsilon = 1e-12);
    }

    #[test]
    fn constrained_boundary_keeps_only_inward_controls() {
        let spec = eikonal_1d(1.0, BcKind::StateConstraint);
        let op = build_scheme(&spec, &[9]).unwrap();
        // Left boundary node 0: admissible controls have drift -alpha >= 0.
        for row in &op.rows[0] {
            let alpha = spec.controls.samples[row.control][0];
            assert!(alpha <= 1e-12, "outward control {alpha} kept at the left boundary");
            if alpha < 0.0 {
                assert_eq!(row.weights.len(), 1);
                assert_eq!(row.weights[0].0, 1);
            }
        }
        let n_kept = op.rows[0].len();
        assert_eq!(n_kept, spec.controls.samples.iter().filter(|s| s[0] <= 0.0).count());
        assert!(matches!(op.boundary_rows[0], BoundaryRow::Constraint));
    }

    #[test]
    fn diffusive_dirichlet_boundary_degenerates_to_clamp() {
        let spec = viscous_quadratic_1d(BcKind::Dirichlet);
        let op = build_scheme(&spec, &[21]).unwrap();
        assert!(op.rows[0].is_empty(), "nonvanishing normal diffusion must drop all controls");
        assert!(matches!(op.boundary_rows[0], BoundaryRow::Clamp { value } if value == 0.0));
    }

    #[test]
    fn diffusive_state_constraint_fails_to_build() {
        let spec = viscous_quadratic_1d(BcKind::StateConstraint);
        let err = build_scheme(&spec, &[21]).unwrap_err();
        assert!(matches!(err, Error::Build(_)), "got {err:?}");
        assert!(err.to_string().contains("normal diffusion"));
    }

    #[test]
    fn neumann_oblique_row_by_hand() {
        // gamma = n: at the left end gamma = -1, forward difference, so the
        // row is (1/h) u_0 - (1/h) u_1 = g.
        let spec = eikonal_1d(0.0, BcKind::Neumann);
        let op = build_scheme(&spec, &[5]).unwrap();
        assert!(op.rows[0].is_empty());
        match &op.boundary_rows[0] {
            BoundaryRow::Oblique { diag, offdiag, datum } => {
                assert_abs_diff_eq!(*diag, 2.0, epsilon = 1e-12);
                assert_eq!(offdiag.len(), 1);
                assert_eq!(offdiag[0].0, 1);
                assert_abs_diff_eq!(offdiag[0].1, -2.0, epsilon = 1e-12);
                assert_abs_diff_eq!(*datum, 0.0, epsilon = 0.0);
            }
            other => panic!("expected oblique row, got {other:?}"),
        }
    }

    #[test]
    fn grid_too_coarse_is_rejected() {
        let spec = eikonal_1d(1.0, BcKind::Dirichlet);
        let err = build_scheme(&spec, &[2]).unwrap_err();
        assert!(err.to_string().contains("grid too coarse"));
    }

    fn rotated_diffusion_spec(theta: f64) -> ProblemSpec {
        // a = R diag(1, 0) R', a rank-one diffusion along angle theta.
        let (s, c) = theta.sin_cos();
        ProblemSpec {
            name: "rotated_diffusion".into(),
            domain: Domain::Rectangle { lo: [-1.0, -1.0], hi: [1.0, 1.0] },
            controls: ControlSet::from_samples(vec![vec![0.0]]).unwrap(),
            coefficients: Coefficients::analytic(
                move |_x, _a| SymMat::full_2d(c * c, s * s, c * s),
                |_x, _a| vec![0.0, 0.0],
                |_x, _a| 1.0,
            ),
            boundary: BoundaryCondition::dirichlet_const(0.0),
        }
    }

    #[test]
    fn rotated_diffusion_violates_monotonicity() {
        // 30 degrees: a22 = 0.25 < |a12| = 0.433, so an axis weight goes
        // negative and the build must identify the offending row.
        let err = build_scheme(&rotated_diffusion_spec(30f64.to_radians()), &[9, 9]).unwrap_err();
        match err {
            Error::Monotonicity { weight, .. } => assert!(weight < 0.0),
            other => panic!("expected monotonicity error, got {other:?}"),
        }
        // Axis-aligned rank-one diffusion is fine.
        build_scheme(&rotated_diffusion_spec(0.0), &[9, 9]).unwrap();
    }

    #[test]
    fn two_dimensional_cross_stencil_is_consistent() {
        // Diagonally dominant full diffusion plus drift; probe the truncation
        // error decay under refinement.
        let spec = ProblemSpec {
            name: "full_2d".into(),
            domain: Domain::Rectangle { lo: [-1.0, -1.0], hi: [1.0, 1.0] },
            controls: ControlSet::from_samples(vec![vec![0.0]]).unwrap(),
            coefficients: Coefficients::analytic(
                |_x, _a| SymMat::full_2d(1.0, 0.8, 0.5),
                |x, _a| vec![0.7 * x[1], -0.4 * x[0]],
                |_x, _a| 0.0,
            ),
            boundary: BoundaryCondition::dirichlet_const(0.0),
        };
        let test = SmoothTest::sinusoid(2, 1.3);
        let mut errs = Vec::new();
        // Start at h = 1/8: the mixed-derivative truncation carries large
        // h^2 constants, so coarser grids are still pre-asymptotic.
        for shape in [17usize, 33, 65] {
            let op = build_scheme(&spec, &[shape, shape]).unwrap();
            check_monotonicity(&op).unwrap();
            errs.push(consistency_probe(&op, &spec, &test));
        }
        // First order at worst; each halving of h must cut the error by at
        // least a factor 2/1.5.
        assert!(errs[1] <= errs[0] / (2.0 / 1.5) + 1e-12, "{errs:?}");
        assert!(errs[2] <= errs[1] / (2.0 / 1.5) + 1e-12, "{errs:?}");
    }

    #[test]
    fn consistency_probe_decays_first_order_1d() {
        let spec = eikonal_1d(1.0, BcKind::StateConstraint);
        let test = SmoothTest::sinusoid(1, 2.0);
        let mut errs = Vec::new();
        for shape in [101usize, 201, 401] {
            let op = build_scheme(&spec, &[shape]).unwrap();
            errs.push(consistency_probe(&op, &spec, &test));
        }
        for k in 0..2 {
            let ratio = errs[k] / errs[k + 1];
            assert!(ratio > 2.0 / 1.5 && ratio < 2.0 * 1.5, "decay ratios off: {errs:?}");
        }
    }

    #[test]
    fn hand_corrupted_operator_fails_the_audit() {
        let spec = constant_cost(1.0, BcKind::StateConstraint);
        let mut op = build_scheme(&spec, &[5]).unwrap();
        op.rows[2][0].weights.push((1, -0.25));
        let err = check_monotonicity(&op).unwrap_err();
        match err {
            Error::Monotonicity { node, control, neighbor, weight } => {
                assert_eq!((node, control, neighbor), (2, 0, 1));
                assert_abs_diff_eq!(weight, -0.25, epsilon = 0.0);
            }
            other => panic!("expected monotonicity error, got {other:?}"),
        }
    }

    #[test]
    fn json_export_has_sparse_triplets() {
        let spec = eikonal_1d(1.0, BcKind::Dirichlet);
        let op = build_scheme(&spec, &[5]).unwrap();
        let doc = op.to_json();
        assert_eq!(doc["n_nodes"], 5);
        assert_eq!(doc["bc_kind"], "dirichlet");
        let weights = doc["weights"].as_array().unwrap();
        assert!(!weights.is_empty());
        assert_eq!(weights[0].as_array().unwrap().len(), 4);
        let boundary = doc["boundary_rows"].as_array().unwrap();
        assert_eq!(boundary.len(), 2);
        assert_eq!(boundary[0]["kind"], "dirichlet");
    }

    #[test]
    fn corner_oblique_rows_average_both_faces() {
        // Rectangle with gamma = n, g = 0: at the lower-left corner both axes
        // are forced inward and both contribute |gamma_d|/h = (1/sqrt2)/h.
        let spec = ProblemSpec {
            name: "corner".into(),
            domain: Domain::Rectangle { lo: [0.0, 0.0], hi: [1.0, 1.0] },
            controls: ControlSet::from_samples(vec![vec![0.0]]).unwrap(),
            coefficients: Coefficients::analytic(
                |_x, _a| SymMat::zero(2),
                |_x, _a| vec![0.0, 0.0],
                |_x, _a| 1.0,
            ),
            boundary: BoundaryCondition::neumann_normal(|_| 0.0),
        };
        let op = build_scheme(&spec, &[5, 5]).unwrap();
        let bp = op.grid.boundary_pos[0].unwrap();
        match &op.boundary_rows[bp] {
            BoundaryRow::Oblique { diag, offdiag, .. } => {
                let expect = 2.0 / 2f64.sqrt() * 4.0; // |gamma_d| / h per axis
                assert_abs_diff_eq!(*diag, expect, epsilon = 1e-12);
                assert_eq!(offdiag.len(), 2);
            }
            other => panic!("expected oblique row at the corner, got {other:?}"),
        }
    }
}
