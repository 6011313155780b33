//! Continuous problem descriptions.
//!
//! A problem is a Bellman operator in sup form,
//!
//! ```text
//! F(x, p, X) = sup_a { -tr(a(x,a) X) - b(x,a).p - L(x,a) }
//! ```
//!
//! over a sampled compact control set, together with a domain (interval or
//! axis-aligned rectangle) and one of three boundary regimes: state
//! constraint, Dirichlet, or oblique Neumann. Operators of this form are
//! degenerate elliptic and convex in `(p, X)`; both properties are exercised
//! by the property tests at the bottom of this module.

use crate::constants::{BOUNDARY_DIFFUSION_TOL, DEFAULT_CONTROL_SAMPLES};
use crate::error::{Error, Result};
use serde::Serialize;
use std::fmt;
use std::sync::Arc;

/// Symmetric matrix up to 2x2, the value type for diffusions and Hessians.
/// In one dimension only `a11` is meaningful.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SymMat {
    pub dim: usize,
    pub a11: f64,
    pub a22: f64,
    pub a12: f64,
}

impl SymMat {
    pub fn zero(dim: usize) -> Self {
        SymMat { dim, a11: 0.0, a22: 0.0, a12: 0.0 }
    }

    pub fn scalar_1d(v: f64) -> Self {
        SymMat { dim: 1, a11: v, a22: 0.0, a12: 0.0 }
    }

    pub fn diag_2d(a11: f64, a22: f64) -> Self {
        SymMat { dim: 2, a11, a22, a12: 0.0 }
    }

    pub fn full_2d(a11: f64, a22: f64, a12: f64) -> Self {
        SymMat { dim: 2, a11, a22, a12 }
    }

    /// `tr(self * other)` for symmetric `other` of the same dimension.
    pub fn ddot(&self, other: &SymMat) -> f64 {
        match self.dim {
            1 => self.a11 * other.a11,
            _ => self.a11 * other.a11 + self.a22 * other.a22 + 2.0 * self.a12 * other.a12,
        }
    }

    /// Smallest eigenvalue; nonnegative for admissible diffusions.
    pub fn eig_min(&self) -> f64 {
        match self.dim {
            1 => self.a11,
            _ => {
                let t = self.a11 + self.a22;
                let d = (self.a11 - self.a22).powi(2) + 4.0 * self.a12 * self.a12;
                0.5 * (t - d.sqrt())
            }
        }
    }

    pub fn scale(&self, s: f64) -> SymMat {
        SymMat { dim: self.dim, a11: s * self.a11, a22: s * self.a22, a12: s * self.a12 }
    }
}

/// Spatial domain: an interval or an axis-aligned rectangle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Domain {
    Interval { lo: f64, hi: f64 },
    Rectangle { lo: [f64; 2], hi: [f64; 2] },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Interval { .. } => 1,
            Domain::Rectangle { .. } => 2,
        }
    }

    pub fn lo(&self, axis: usize) -> f64 {
        match self {
            Domain::Interval { lo, .. } => *lo,
            Domain::Rectangle { lo, .. } => lo[axis],
        }
    }

    pub fn hi(&self, axis: usize) -> f64 {
        match self {
            Domain::Interval { hi, .. } => *hi,
            Domain::Rectangle { hi, .. } => hi[axis],
        }
    }

    /// Closure membership with a small tolerance for roundoff at the faces.
    pub fn contains(&self, x: &[f64]) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        for d in 0..self.dim() {
            let w = self.hi(d) - self.lo(d);
            let tol = 1e-12 * (1.0 + w.abs());
            if x[d] < self.lo(d) - tol || x[d] > self.hi(d) + tol {
                return false;
            }
        }
        true
    }
}

/// Finite sample of a compact control set.
///
/// `truncation_radius` records the radius of the ball the samples cover when
/// the natural control set is a ball (or a truncated unbounded set); it feeds
/// the coercivity check in [`validate_spec`].
#[derive(Clone, Debug, Serialize)]
pub struct ControlSet {
    pub samples: Vec<Vec<f64>>,
    pub dim: usize,
    pub truncation_radius: Option<f64>,
}

impl ControlSet {
    pub fn from_samples(samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("control set has no samples".into()));
        }
        let dim = samples[0].len();
        if dim == 0 || samples.iter().any(|s| s.len() != dim) {
            return Err(Error::Validation("control samples have inconsistent dimensions".into()));
        }
        Ok(ControlSet { samples, dim, truncation_radius: None })
    }

    /// Uniform symmetric grid on `[-radius, radius]`.
    pub fn symmetric_grid_1d(radius: f64, count: usize) -> Self {
        assert!(count >= 1 && radius >= 0.0);
        let samples = if count == 1 {
            vec![vec![0.0]]
        } else {
            (0..count)
                .map(|k| vec![-radius + 2.0 * radius * (k as f64) / ((count - 1) as f64)])
                .collect()
        };
        ControlSet { samples, dim: 1, truncation_radius: Some(radius) }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

type DiffusionFn = Arc<dyn Fn(&[f64], &[f64]) -> SymMat + Send + Sync>;
type DriftFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
type CostFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Oblique direction on the boundary: `(x, outward_normal) -> gamma`.
type GammaField = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Node lookup metadata for tabulated coefficients.
#[derive(Clone, Debug)]
struct TabGrid {
    dim: usize,
    lo: [f64; 2],
    h: [f64; 2],
    shape: [usize; 2],
}

impl TabGrid {
    fn nearest_node(&self, x: &[f64]) -> usize {
        let mut idx = [0usize; 2];
        for d in 0..self.dim {
            let t = if self.h[d] > 0.0 { ((x[d] - self.lo[d]) / self.h[d]).round() } else { 0.0 };
            idx[d] = (t.max(0.0) as usize).min(self.shape[d] - 1);
        }
        if self.dim == 1 {
            idx[0]
        } else {
            idx[1] * self.shape[0] + idx[0]
        }
    }
}

/// Coefficient triple `(a, b, L)`, either closed-form closures or values
/// tabulated on a grid times the control samples.
#[derive(Clone)]
pub struct Coefficients {
    inner: CoeffKind,
}

#[derive(Clone)]
enum CoeffKind {
    Analytic {
        a: DiffusionFn,
        b: DriftFn,
        l: CostFn,
    },
    Tabulated {
        grid: TabGrid,
        /// `[node][control]` layouts.
        a: Arc<Vec<Vec<SymMat>>>,
        b: Arc<Vec<Vec<Vec<f64>>>>,
        l: Arc<Vec<Vec<f64>>>,
    },
}

impl fmt::Debug for Coefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.inner {
            CoeffKind::Analytic { .. } => f.write_str("Coefficients::Analytic"),
            CoeffKind::Tabulated { .. } => f.write_str("Coefficients::Tabulated"),
        }
    }
}

impl Coefficients {
    pub fn analytic(
        a: impl Fn(&[f64], &[f64]) -> SymMat + Send + Sync + 'static,
        b: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        l: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Coefficients { inner: CoeffKind::Analytic { a: Arc::new(a), b: Arc::new(b), l: Arc::new(l) } }
    }

    /// Values tabulated on the nodes of a uniform grid; evaluation at an
    /// arbitrary point snaps to the nearest node.
    pub fn tabulated(
        dim: usize,
        lo: [f64; 2],
        h: [f64; 2],
        shape: [usize; 2],
        a: Vec<Vec<SymMat>>,
        b: Vec<Vec<Vec<f64>>>,
        l: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n_nodes = if dim == 1 { shape[0] } else { shape[0] * shape[1] };
        if a.len() != n_nodes || b.len() != n_nodes || l.len() != n_nodes {
            return Err(Error::Config(format!(
                "tabulated coefficients must have one row per grid node ({} expected, got a:{} b:{} l:{})",
                n_nodes,
                a.len(),
                b.len(),
                l.len()
            )));
        }
        Ok(Coefficients {
            inner: CoeffKind::Tabulated {
                grid: TabGrid { dim, lo, h, shape },
                a: Arc::new(a),
                b: Arc::new(b),
                l: Arc::new(l),
            },
        })
    }

    pub fn diffusion(&self, x: &[f64], control_idx: usize, alpha: &[f64]) -> SymMat {
        match &self.inner {
            CoeffKind::Analytic { a, .. } => a(x, alpha),
            CoeffKind::Tabulated { grid, a, .. } => a[grid.nearest_node(x)][control_idx],
        }
    }

    pub fn drift(&self, x: &[f64], control_idx: usize, alpha: &[f64]) -> Vec<f64> {
        match &self.inner {
            CoeffKind::Analytic { b, .. } => b(x, alpha),
            CoeffKind::Tabulated { grid, b, .. } => b[grid.nearest_node(x)][control_idx].clone(),
        }
    }

    pub fn cost(&self, x: &[f64], control_idx: usize, alpha: &[f64]) -> f64 {
        match &self.inner {
            CoeffKind::Analytic { l, .. } => l(x, alpha),
            CoeffKind::Tabulated { grid, l, .. } => l[grid.nearest_node(x)][control_idx],
        }
    }
}

/// Boundary regime tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BcKind {
    StateConstraint,
    Dirichlet,
    Neumann,
}

impl fmt::Display for BcKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BcKind::StateConstraint => f.write_str("state_constraint"),
            BcKind::Dirichlet => f.write_str("dirichlet"),
            BcKind::Neumann => f.write_str("neumann"),
        }
    }
}

/// Boundary condition: the regime plus its data.
///
/// * state constraint: no data; boundary nodes keep only inward stencils.
/// * Dirichlet: datum `g`; realized in the relaxed (comparison-compatible)
///   sense, so the discrete solution may detach from `g` where the equation
///   forbids attainment.
/// * Neumann: datum `g` and oblique direction `gamma` with `gamma . n > 0`.
#[derive(Clone)]
pub enum BoundaryCondition {
    StateConstraint,
    Dirichlet { g: ScalarField },
    Neumann { g: ScalarField, gamma: GammaField },
}

impl fmt::Debug for BoundaryCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BoundaryCondition::{}", self.kind())
    }
}

impl BoundaryCondition {
    pub fn state_constraint() -> Self {
        BoundaryCondition::StateConstraint
    }

    pub fn dirichlet(g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        BoundaryCondition::Dirichlet { g: Arc::new(g) }
    }

    pub fn dirichlet_const(g: f64) -> Self {
        Self::dirichlet(move |_| g)
    }

    /// Neumann condition with the outward normal as direction.
    pub fn neumann_normal(g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        BoundaryCondition::Neumann {
            g: Arc::new(g),
            gamma: Arc::new(|_x, n| n.to_vec()),
        }
    }

    pub fn neumann(
        g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gamma: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        BoundaryCondition::Neumann { g: Arc::new(g), gamma: Arc::new(gamma) }
    }

    pub fn kind(&self) -> BcKind {
        match self {
            BoundaryCondition::StateConstraint => BcKind::StateConstraint,
            BoundaryCondition::Dirichlet { .. } => BcKind::Dirichlet,
            BoundaryCondition::Neumann { .. } => BcKind::Neumann,
        }
    }

    /// Boundary datum at `x` (zero for the state constraint, which has none).
    pub fn g_at(&self, x: &[f64]) -> f64 {
        match self {
            BoundaryCondition::StateConstraint => 0.0,
            BoundaryCondition::Dirichlet { g } => g(x),
            BoundaryCondition::Neumann { g, .. } => g(x),
        }
    }

    /// Oblique direction at a boundary point with outward normal `n`.
    pub fn gamma_at(&self, x: &[f64], n: &[f64]) -> Vec<f64> {
        match self {
            BoundaryCondition::Neumann { gamma, .. } => gamma(x, n),
            _ => n.to_vec(),
        }
    }
}

/// A full problem description: domain, sampled controls, coefficients,
/// boundary condition, and a human-readable name.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub name: String,
    pub domain: Domain,
    pub controls: ControlSet,
    pub coefficients: Coefficients,
    pub boundary: BoundaryCondition,
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn check_eval_args(&self, x: &[f64], p: &[f64], big_x: &SymMat) -> Result<()> {
        if !self.domain.contains(x) {
            return Err(Error::Domain(format!("point {:?} outside domain closure", x)));
        }
        if p.len() != self.dim() || big_x.dim != self.dim() {
            return Err(Error::Domain(format!(
                "gradient/Hessian dimension mismatch: domain dim {}, p dim {}, X dim {}",
                self.dim(),
                p.len(),
                big_x.dim
            )));
        }
        Ok(())
    }
}

/// Pointwise Bellman operator value `F(x, p, X)`: the max over control
/// samples of `-tr(a X) - b.p - L`. Ties keep the first maximizer, so the
/// value (and any reported argmax) is deterministic.
pub fn bellman_f(spec: &ProblemSpec, x: &[f64], p: &[f64], big_x: &SymMat) -> Result<f64> {
    spec.check_eval_args(x, p, big_x)?;
    let mut best = f64::NEG_INFINITY;
    for (ci, alpha) in spec.controls.samples.iter().enumerate() {
        let a = spec.coefficients.diffusion(x, ci, alpha);
        let b = spec.coefficients.drift(x, ci, alpha);
        let l = spec.coefficients.cost(x, ci, alpha);
        let mut v = -a.ddot(big_x) - l;
        for d in 0..p.len() {
            v -= b[d] * p[d];
        }
        if v > best {
            best = v;
        }
    }
    Ok(best)
}

/// Rescaled operator `F_phi(x, p, X) = t F(x, p/t, X/t) - chi(x)` for the
/// cost `phi = t L + chi`. Requires `t > 0`.
pub fn f_phi(
    spec: &ProblemSpec,
    t: f64,
    chi: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    p: &[f64],
    big_x: &SymMat,
) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("rescaling parameter t must be positive, got {t}")));
    }
    let p_scaled: Vec<f64> = p.iter().map(|v| v / t).collect();
    let x_scaled = big_x.scale(1.0 / t);
    Ok(t * bellman_f(spec, x, &p_scaled, &x_scaled)? - chi(x))
}

fn bc_from_kind(kind: BcKind) -> BoundaryCondition {
    match kind {
        BcKind::StateConstraint => BoundaryCondition::state_constraint(),
        BcKind::Dirichlet => BoundaryCondition::dirichlet_const(0.0),
        BcKind::Neumann => BoundaryCondition::neumann_normal(|_| 0.0),
    }
}

/// Eikonal benchmark on `(-1, 1)`: `F(x, p) = |p| + m`, realized by drifts
/// `b(x, alpha) = -alpha` over the sampled unit ball and cost `L = -m`.
pub fn eikonal_1d(m: f64, bc: BcKind) -> ProblemSpec {
    ProblemSpec {
        name: format!("eikonal_1d(m={m},{bc})"),
        domain: Domain::Interval { lo: -1.0, hi: 1.0 },
        controls: ControlSet::symmetric_grid_1d(1.0, DEFAULT_CONTROL_SAMPLES),
        coefficients: Coefficients::analytic(
            |_x, _a| SymMat::zero(1),
            |_x, a| vec![-a[0]],
            move |_x, _a| -m,
        ),
        boundary: bc_from_kind(bc),
    }
}

/// Viscous quadratic benchmark on `(-1, 1)`:
/// `F(x, p, X) = |p|^2/2 - f(x) - eps X` with `f(x) = cos(pi x)`, realized by
/// drifts `b(x, q) = -q` over `[-Q, Q]` and cost `L = |q|^2/2 + f(x)`.
/// The quadratic sup is exact for `|p| <= Q`.
pub fn viscous_quadratic_1d(bc: BcKind) -> ProblemSpec {
    const EPS: f64 = 1e-2;
    const Q: f64 = 2.0;
    ProblemSpec {
        name: format!("viscous_quadratic_1d({bc})"),
        domain: Domain::Interval { lo: -1.0, hi: 1.0 },
        controls: ControlSet::symmetric_grid_1d(Q, DEFAULT_CONTROL_SAMPLES),
        coefficients: Coefficients::analytic(
            |_x, _q| SymMat::scalar_1d(EPS),
            |_x, q| vec![-q[0]],
            |x, q| 0.5 * q[0] * q[0] + (std::f64::consts::PI * x[0]).cos(),
        ),
        boundary: bc_from_kind(bc),
    }
}

/// Degenerate benchmark with no dynamics: `a = b = 0`, `L = cost`. The
/// discounted solution is exactly `cost / lambda` and the critical value is
/// `-cost`.
pub fn constant_cost(cost: f64, bc: BcKind) -> ProblemSpec {
    ProblemSpec {
        name: format!("constant_cost({cost},{bc})"),
        domain: Domain::Interval { lo: -1.0, hi: 1.0 },
        controls: ControlSet { samples: vec![vec![0.0]], dim: 1, truncation_radius: None },
        coefficients: Coefficients::analytic(
            |_x, _a| SymMat::zero(1),
            |_x, _a| vec![0.0],
            move |_x, _a| cost,
        ),
        boundary: bc_from_kind(bc),
    }
}

/// The benchmark catalog: every closed-form instance the integration tests
/// and the CLI presets run against. Diffusive instances skip the state
/// constraint (their normal diffusion does not vanish at the boundary, so no
/// constrained scheme exists).
pub fn catalog() -> Vec<ProblemSpec> {
    vec![
        eikonal_1d(1.0, BcKind::StateConstraint),
        eikonal_1d(1.0, BcKind::Dirichlet),
        eikonal_1d(1.0, BcKind::Neumann),
        eikonal_1d(-1.0, BcKind::StateConstraint),
        eikonal_1d(-1.0, BcKind::Dirichlet),
        eikonal_1d(-1.0, BcKind::Neumann),
        viscous_quadratic_1d(BcKind::Dirichlet),
        viscous_quadratic_1d(BcKind::Neumann),
        constant_cost(3.0, BcKind::StateConstraint),
        constant_cost(3.0, BcKind::Neumann),
    ]
}

/// One named validation check with a pass flag and a human-readable detail.
#[derive(Clone, Debug, Serialize)]
pub struct ValidationCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Outcome of [`validate_spec`]: a list of checks, each naming the worst
/// offending point when it fails.
#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn push(&mut self, name: &str, pass: bool, detail: String) {
        self.checks.push(ValidationCheck { name: name.to_string(), pass, detail });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "[{}] {}: {}", if c.pass { "pass" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Probe nodes of a `shape` lattice over the domain closure, with boundary
/// metadata `(index, point, outward_normal, on_faces)`.
struct ProbeLattice {
    points: Vec<Vec<f64>>,
    boundary: Vec<(usize, Vec<f64>)>,
    normals: Vec<Vec<f64>>,
    h_min: f64,
}

fn probe_lattice(domain: &Domain, shape: &[usize]) -> ProbeLattice {
    let dim = domain.dim();
    let counts: Vec<usize> = (0..dim).map(|d| shape.get(d).copied().unwrap_or(shape[0]).max(3)).collect();
    let hs: Vec<f64> =
        (0..dim).map(|d| (domain.hi(d) - domain.lo(d)) / ((counts[d] - 1) as f64)).collect();
    let mut points = Vec::new();
    let mut boundary = Vec::new();
    let mut normals = Vec::new();
    let total: usize = counts.iter().product();
    for flat in 0..total {
        let mut idx = vec![0usize; dim];
        let mut r = flat;
        for d in 0..dim {
            idx[d] = r % counts[d];
            r /= counts[d];
        }
        let x: Vec<f64> = (0..dim).map(|d| domain.lo(d) + hs[d] * idx[d] as f64).collect();
        let mut normal = vec![0.0; dim];
        let mut on_boundary = false;
        for d in 0..dim {
            if idx[d] == 0 {
                normal[d] = -1.0;
                on_boundary = true;
            } else if idx[d] == counts[d] - 1 {
                normal[d] = 1.0;
                on_boundary = true;
            }
        }
        if on_boundary {
            let norm: f64 = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
            boundary.push((points.len(), x.clone()));
            normals.push(normal.iter().map(|v| v / norm).collect());
        }
        points.push(x);
    }
    let h_min = hs.iter().cloned().fold(f64::INFINITY, f64::min);
    ProbeLattice { points, boundary, normals, h_min }
}

/// Validate a problem description on a probe lattice: degenerate ellipticity
/// of `a`, boundedness and coercivity of `L`, boundary compatibility for the
/// declared regime, and a continuity sweep over all coefficient fields.
/// `shape` defaults to a coarse lattice when `None`.
pub fn validate_spec(spec: &ProblemSpec, shape: Option<&[usize]>) -> ValidationReport {
    let default_shape = vec![33usize; spec.dim()];
    let shape: Vec<usize> = shape.map(|s| s.to_vec()).unwrap_or(default_shape);
    let lat = probe_lattice(&spec.domain, &shape);
    let mut report = ValidationReport { checks: Vec::new() };

    // Control set shape.
    {
        let ok = !spec.controls.is_empty()
            && spec.controls.samples.iter().all(|s| {
                s.len() == spec.controls.dim && s.iter().all(|v| v.is_finite())
            });
        let radius_ok = match spec.controls.truncation_radius {
            Some(r) => spec
                .controls
                .samples
                .iter()
                .all(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt() <= r + 1e-12),
            None => true,
        };
        report.push(
            "control_set",
            ok && radius_ok,
            format!(
                "{} samples, dim {}, truncation radius {:?}",
                spec.controls.len(),
                spec.controls.dim,
                spec.controls.truncation_radius
            ),
        );
    }

    // Degenerate ellipticity: a(x, alpha) PSD everywhere.
    {
        let mut worst = f64::INFINITY;
        let mut worst_at = (vec![], vec![]);
        for x in &lat.points {
            for (ci, alpha) in spec.controls.samples.iter().enumerate() {
                let a = spec.coefficients.diffusion(x, ci, alpha);
                let e = a.eig_min();
                if !e.is_finite() {
                    worst = f64::NEG_INFINITY;
                    worst_at = (x.clone(), alpha.clone());
                    break;
                }
                if e < worst {
                    worst = e;
                    worst_at = (x.clone(), alpha.clone());
                }
            }
        }
        let pass = worst >= -1e-12;
        report.push(
            "ellipticity",
            pass,
            format!("min eigenvalue {worst:.3e} at x={:?}, alpha={:?}", worst_at.0, worst_at.1),
        );
    }

    // Cost bounded below and finite.
    {
        let mut min_l = f64::INFINITY;
        let mut finite = true;
        for x in &lat.points {
            for (ci, alpha) in spec.controls.samples.iter().enumerate() {
                let l = spec.coefficients.cost(x, ci, alpha);
                if !l.is_finite() {
                    finite = false;
                }
                min_l = min_l.min(l);
            }
        }
        report.push(
            "cost_bounded_below",
            finite && min_l > -1e15,
            format!("min L = {min_l:.6}"),
        );
    }

    // Coercivity signal at the sample extremes, when a truncation radius is
    // declared: the cost floor at the outermost samples must not dip below
    // the floor over the innermost sample.
    {
        match spec.controls.truncation_radius {
            Some(r) if r > 0.0 => {
                let norms: Vec<f64> = spec
                    .controls
                    .samples
                    .iter()
                    .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                let inner_idx = norms
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                let floor_at = |ci: usize| -> f64 {
                    lat.points
                        .iter()
                        .map(|x| spec.coefficients.cost(x, ci, &spec.controls.samples[ci]))
                        .fold(f64::INFINITY, f64::min)
                };
                let inner_floor = floor_at(inner_idx);
                let mut pass = true;
                let mut worst = f64::INFINITY;
                for (ci, n) in norms.iter().enumerate() {
                    if *n >= 0.9 * r {
                        let f = floor_at(ci);
                        worst = worst.min(f);
                        if f < inner_floor - 1e-9 {
                            pass = false;
                        }
                    }
                }
                report.push(
                    "coercivity",
                    pass,
                    format!(
                        "cost floor at extreme samples {worst:.6} vs inner floor {inner_floor:.6}"
                    ),
                );
            }
            _ => {
                report.push("coercivity", true, "no truncation radius declared".into());
            }
        }
    }

    // Boundary compatibility per regime.
    match spec.boundary.kind() {
        BcKind::StateConstraint => {
            let mut worst = 0.0f64;
            let mut worst_node = None;
            for (bi, (_, x)) in lat.boundary.iter().enumerate() {
                let n = &lat.normals[bi];
                for (ci, alpha) in spec.controls.samples.iter().enumerate() {
                    let a = spec.coefficients.diffusion(x, ci, alpha);
                    // Normal component n' a n.
                    let ann = match spec.dim() {
                        1 => a.a11,
                        _ => {
                            a.a11 * n[0] * n[0] + a.a22 * n[1] * n[1] + 2.0 * a.a12 * n[0] * n[1]
                        }
                    };
                    if ann.abs() > worst {
                        worst = ann.abs();
                        worst_node = Some(x.clone());
                    }
                }
            }
            let pass = worst <= BOUNDARY_DIFFUSION_TOL;
            report.push(
                "boundary_state_constraint",
                pass,
                format!("max normal diffusion on boundary {worst:.3e} at {:?}", worst_node),
            );
        }
        BcKind::Dirichlet => {
            let mut finite = true;
            let mut worst = None;
            for (_, x) in &lat.boundary {
                if !spec.boundary.g_at(x).is_finite() {
                    finite = false;
                    worst = Some(x.clone());
                }
            }
            report.push(
                "boundary_dirichlet",
                finite,
                match worst {
                    Some(x) => format!("non-finite datum at {:?}", x),
                    None => "datum finite on boundary".into(),
                },
            );
        }
        BcKind::Neumann => {
            let mut min_gn = f64::INFINITY;
            let mut worst_at = vec![];
            let mut finite = true;
            for (bi, (_, x)) in lat.boundary.iter().enumerate() {
                let n = &lat.normals[bi];
                let gamma = spec.boundary.gamma_at(x, n);
                let gn: f64 = gamma.iter().zip(n.iter()).map(|(g, n)| g * n).sum();
                if !spec.boundary.g_at(x).is_finite() || gamma.iter().any(|v| !v.is_finite()) {
                    finite = false;
                }
                if gn < min_gn {
                    min_gn = gn;
                    worst_at = x.clone();
                }
            }
            let pass = finite && min_gn > 0.0;
            report.push(
                "boundary_obliqueness",
                pass,
                format!("min gamma.n = {min_gn:.6} at {:?}", worst_at),
            );
        }
    }

    // Continuity sweep: coefficients must stay finite and move continuously
    // between nearby probe points. Only NaN/inf or wild per-step jumps fail.
    {
        let delta = lat.h_min / 7.0;
        let mut max_jump = 0.0f64;
        let mut finite = true;
        let dim = spec.dim();
        for x in &lat.points {
            let mut x2 = x.clone();
            for d in 0..dim {
                x2[d] = (x[d] + delta).min(spec.domain.hi(d));
            }
            for (ci, alpha) in spec.controls.samples.iter().enumerate() {
                let pairs = [
                    (
                        spec.coefficients.cost(x, ci, alpha),
                        spec.coefficients.cost(&x2, ci, alpha),
                    ),
                    (
                        spec.coefficients.diffusion(x, ci, alpha).a11,
                        spec.coefficients.diffusion(&x2, ci, alpha).a11,
                    ),
                    (
                        spec.coefficients.drift(x, ci, alpha)[0],
                        spec.coefficients.drift(&x2, ci, alpha)[0],
                    ),
                ];
                for (u, v) in pairs {
                    if !u.is_finite() || !v.is_finite() {
                        finite = false;
                    }
                    max_jump = max_jump.max((u - v).abs());
                }
            }
        }
        let pass = finite && max_jump < 1e6 * delta.max(1e-12);
        report.push(
            "continuity_probe",
            pass,
            format!("max coefficient jump {max_jump:.3e} over step {delta:.3e}"),
        );
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eikonal_pointwise_values() {
        let spec = eikonal_1d(1.0, BcKind::StateConstraint);
        // F(x, p, 0) = |p| + 1; sample grid contains the unit maximizers.
        for p in [-2.0, -0.5, 0.0, 0.5, 2.0] {
            let f = bellman_f(&spec, &[0.3], &[p], &SymMat::zero(1)).unwrap();
            assert_abs_diff_eq!(f, p.abs() + 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn viscous_quadratic_pointwise_values() {
        let spec = viscous_quadratic_1d(BcKind::Dirichlet);
        // At p aligned with a control sample the quadratic sup is exact:
        // F(x, p, X) = p^2/2 - cos(pi x) - 0.01 X.
        let x = 0.25;
        let f = bellman_f(&spec, &[x], &[1.0], &SymMat::scalar_1d(2.0)).unwrap();
        let expect = 0.5 - (std::f64::consts::PI * x).cos() - 1e-2 * 2.0;
        assert_abs_diff_eq!(f, expect, epsilon = 1e-13);
        // Off-sample p: the sampled sup lags by at most (step/2)^2 / 2.
        let step = 4.0 / 40.0;
        let p = 0.5 * step + 0.7; // halfway between samples
        let f = bellman_f(&spec, &[x], &[p], &SymMat::zero(1)).unwrap();
        let expect = 0.5 * p * p - (std::f64::consts::PI * x).cos();
        assert!(f <= expect + 1e-13);
        assert!(f >= expect - step * step / 8.0 - 1e-13);
    }

    #[test]
    fn constant_cost_is_flat() {
        let spec = constant_cost(3.0, BcKind::StateConstraint);
        let f = bellman_f(&spec, &[0.0], &[7.0], &SymMat::scalar_1d(-4.0)).unwrap();
        assert_abs_diff_eq!(f, -3.0, epsilon = 0.0);
    }

    #[test]
    fn bellman_f_rejects_bad_arguments() {
        let spec = eikonal_1d(1.0, BcKind::Dirichlet);
        assert!(bellman_f(&spec, &[2.0], &[0.0], &SymMat::zero(1)).is_err());
        assert!(bellman_f(&spec, &[0.0], &[0.0, 1.0], &SymMat::zero(1)).is_err());
        let mut x2 = SymMat::zero(2);
        x2.a11 = 1.0;
        assert!(bellman_f(&spec, &[0.0], &[0.0], &x2).is_err());
    }

    #[test]
    fn f_phi_matches_rescaling_identity_by_hand() {
        let spec = eikonal_1d(-1.0, BcKind::Neumann);
        let chi = |x: &[f64]| 0.25 * x[0];
        // t F(x, p/t, X/t) - chi: for the eikonal, = |p| - t + t... worked by
        // hand: F(x, p/t, 0) = |p|/t + m, so t F = |p| + t m; with m = -1 and
        // t = 2: |p| - 2 - chi(x).
        let v = f_phi(&spec, 2.0, &chi, &[0.4], &[1.5], &SymMat::zero(1)).unwrap();
        assert_abs_diff_eq!(v, 1.5 - 2.0 - 0.1, epsilon = 1e-14);
        assert!(f_phi(&spec, 0.0, &chi, &[0.4], &[1.5], &SymMat::zero(1)).is_err());
        assert!(f_phi(&spec, -1.0, &chi, &[0.4], &[1.5], &SymMat::zero(1)).is_err());
    }

    #[test]
    fn catalog_validates_clean() {
        for spec in catalog() {
            let report = validate_spec(&spec, None);
            assert!(report.pass(), "{} failed validation:\n{report}", spec.name);
        }
    }

    #[test]
    fn validate_flags_nonoblique_gamma() {
        let mut spec = eikonal_1d(0.0, BcKind::Neumann);
        spec.boundary = BoundaryCondition::neumann(|_| 0.0, |_x, n| n.iter().map(|v| -v).collect());
        let report = validate_spec(&spec, None);
        assert!(!report.pass());
        let check = report.checks.iter().find(|c| c.name == "boundary_obliqueness").unwrap();
        assert!(!check.pass);
        assert!(check.detail.contains("min gamma.n"));
    }

    #[test]
    fn validate_flags_constrained_diffusive_boundary() {
        let spec = viscous_quadratic_1d(BcKind::StateConstraint);
        let report = validate_spec(&spec, None);
        let check = report.checks.iter().find(|c| c.name == "boundary_state_constraint").unwrap();
        assert!(!check.pass, "normal diffusion must be flagged: {}", check.detail);
    }

    #[test]
    fn validate_flags_negative_diffusion() {
        let spec = ProblemSpec {
            name: "bad_diffusion".into(),
            domain: Domain::Interval { lo: 0.0, hi: 1.0 },
            controls: ControlSet::symmetric_grid_1d(1.0, 3),
            coefficients: Coefficients::analytic(
                |x, _a| SymMat::scalar_1d(-0.1 * x[0]),
                |_x, _a| vec![0.0],
                |_x, _a| 0.0,
            ),
            boundary: BoundaryCondition::state_constraint(),
        };
        let report = validate_spec(&spec, None);
        let check = report.checks.iter().find(|c| c.name == "ellipticity").unwrap();
        assert!(!check.pass);
    }

    #[test]
    fn tabulated_coefficients_snap_to_nodes() {
        let coeffs = Coefficients::tabulated(
            1,
            [0.0, 0.0],
            [0.5, 0.0],
            [3, 1],
            vec![vec![SymMat::scalar_1d(0.0)]; 3],
            vec![vec![vec![1.0]]; 3],
            vec![vec![10.0], vec![20.0], vec![30.0]],
        )
        .unwrap();
        assert_eq!(coeffs.cost(&[0.0], 0, &[0.0]), 10.0);
        assert_eq!(coeffs.cost(&[0.55], 0, &[0.0]), 20.0);
        assert_eq!(coeffs.cost(&[0.9], 0, &[0.0]), 30.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn specs() -> Vec<ProblemSpec> {
            vec![eikonal_1d(1.0, BcKind::StateConstraint), viscous_quadratic_1d(BcKind::Dirichlet)]
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            /// Positive homogeneity of the rescaling: F_{tL}(x, tp, tX) = t F(x, p, X).
            #[test]
            fn positive_homogeneity(x in -0.99f64..0.99, p in -3.0f64..3.0, xx in -5.0f64..5.0, t in 0.1f64..10.0) {
                for spec in specs() {
                    let base = bellman_f(&spec, &[x], &[p], &SymMat::scalar_1d(xx)).unwrap();
                    let scaled = f_phi(&spec, t, &|_: &[f64]| 0.0, &[x], &[t * p], &SymMat::scalar_1d(t * xx)).unwrap();
                    let tol = 1e-12 * (1.0 + base.abs()) * (1.0 + t);
                    prop_assert!((scaled - t * base).abs() <= tol,
                        "{}: t F = {:.17} vs F_phi = {:.17}", spec.name, t * base, scaled);
                }
            }

            /// Convexity in (p, X): a sampled sup of affine maps.
            #[test]
            fn convex_in_p_x(x in -0.99f64..0.99,
                             p1 in -3.0f64..3.0, p2 in -3.0f64..3.0,
                             x1 in -5.0f64..5.0, x2 in -5.0f64..5.0,
                             theta in 0.0f64..1.0) {
                for spec in specs() {
                    let fa = bellman_f(&spec, &[x], &[p1], &SymMat::scalar_1d(x1)).unwrap();
                    let fb = bellman_f(&spec, &[x], &[p2], &SymMat::scalar_1d(x2)).unwrap();
                    let pm = theta * p1 + (1.0 - theta) * p2;
                    let xm = theta * x1 + (1.0 - theta) * x2;
                    let fm = bellman_f(&spec, &[x], &[pm], &SymMat::scalar_1d(xm)).unwrap();
                    let bound = theta * fa + (1.0 - theta) * fb;
                    prop_assert!(fm <= bound + 1e-12 * (1.0 + bound.abs()),
                        "{}: F(mid) = {fm} > {bound}", spec.name);
                }
            }

            /// Degenerate ellipticity: X <= Y (as forms) implies F(.., Y) <= F(.., X).
            #[test]
            fn degenerate_ellipticity(x in -0.99f64..0.99, p in -3.0f64..3.0,
                                      xx in -5.0f64..5.0, bump in 0.0f64..5.0) {
                for spec in specs() {
                    let f_low = bellman_f(&spec, &[x], &[p], &SymMat::scalar_1d(xx)).unwrap();
                    let f_high = bellman_f(&spec, &[x], &[p], &SymMat::scalar_1d(xx + bump)).unwrap();
                    prop_assert!(f_high <= f_low + 1e-12 * (1.0 + f_low.abs()));
                }
            }

            /// Enlarging the control sample set can only increase the sup.
            #[test]
            fn nested_control_sets(x in -0.99f64..0.99, p in -3.0f64..3.0,
                                   xx in -5.0f64..5.0, keep in 1usize..41) {
                for spec in specs() {
                    let mut smaller = spec.clone();
                    smaller.controls.samples.truncate(keep.min(spec.controls.len()));
                    let f_small = bellman_f(&smaller, &[x], &[p], &SymMat::scalar_1d(xx)).unwrap();
                    let f_full = bellman_f(&spec, &[x], &[p], &SymMat::scalar_1d(xx)).unwrap();
                    prop_assert!(f_small <= f_full + 1e-15);
                }
            }
        }
    }
}
