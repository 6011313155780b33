//! Vanishing-discount experiments: solve a decreasing discount schedule,
//! normalize the family by the critical value, tabulate sup-norm deltas,
//! extrapolate the limit profile, and audit it against the optimal measures
//! (selection inequality, stationarity, equicontinuity). Optionally writes
//! the whole run to disk as CSV/JSON/gnuplot artifacts.

use std::path::{Path, PathBuf};
use std::{fmt::Write as _, fs};

use serde::Serialize;

use crate::constants::{
    DEFAULT_SCHEDULE, DEFAULT_SEED, DEFAULT_SHAPE_1D, DELTA_MONOTONE_SLACK,
    EQUICONTINUITY_GROWTH_FACTOR, EXACT_DUAL_TOL, POLICY_ITERATION_MAX_ROUNDS,
    ROUTE_AGREEMENT_TOL, SELECTION_TOL_FACTOR, STUDY_DELTA_FLOOR, STUDY_DELTA_H_FACTOR,
};
use crate::discount::{policy_iteration, ValueFunction};
use crate::discretize::{build_scheme, DiscreteOperator, Grid};
use crate::ergodic::{
    critical_value_measure_lp, critical_value_subsolution_lp, ergodic_residual,
    extrapolate_to_zero, validate_schedule, Dichotomy,
};
use crate::error::{Error, Result};
use crate::measures::{green_measure, mather_measure, stationarity_residual, MeasurePair};
use crate::problem::{BcKind, ProblemSpec};

/// Everything one study run needs. Build with [`StudyConfig::new`] and adjust
/// fields before calling [`run_study`].
#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub spec: ProblemSpec,
    /// Grid shapes to repeat the sweep on, coarse to fine. The headline
    /// quantities (limit profile, measures, selection report) come from the
    /// last entry; earlier entries separate mesh error from discount error.
    pub shapes: Vec<Vec<usize>>,
    /// Strictly decreasing positive discounts, at least three of them.
    pub schedule: Vec<f64>,
    /// Reference node index (per shape); `None` picks each grid's center.
    pub reference_node: Option<usize>,
    /// Artifact directory; `None` keeps the run in memory.
    pub output_dir: Option<PathBuf>,
    /// Recorded in the report so downstream membership sampling stays
    /// reproducible.
    pub seed: u64,
    /// Worker threads for the per-discount solves; `0` means one per CPU.
    pub jobs: usize,
    /// Override for the |vanishing - subsolution| agreement bound; `None`
    /// uses the mesh-scaled default.
    pub vanishing_tol: Option<f64>,
    /// Override for the |subsolution - measure| exact-duality bound.
    pub duality_tol: Option<f64>,
}

impl StudyConfig {
    pub fn new(spec: ProblemSpec) -> Self {
        let shapes = if spec.dim() == 1 {
            vec![vec![DEFAULT_SHAPE_1D / 2 + 1], vec![DEFAULT_SHAPE_1D]]
        } else {
            // The measure programs keep a dense basis inverse, so default 2D
            // studies stay on modest grids.
            vec![vec![31, 31], vec![41, 41]]
        };
        StudyConfig {
            spec,
            shapes,
            schedule: DEFAULT_SCHEDULE.to_vec(),
            reference_node: None,
            output_dir: None,
            seed: DEFAULT_SEED,
            jobs: 1,
            vanishing_tol: None,
            duality_tol: None,
        }
    }
}

/// One discount step of a convergence table.
#[derive(Clone, Debug, Serialize)]
pub struct TableRow {
    pub lambda: f64,
    /// `lambda * v^lambda` at the reference node.
    pub level: f64,
    /// Sup distance to the previous normalized iterate; `None` on the first
    /// row.
    pub delta: Option<f64>,
    /// Discounted-solve residual.
    pub residual: f64,
    /// Policy-improvement rounds spent.
    pub rounds: usize,
}

/// The normalized family on one grid: per-discount rows plus the
/// extrapolated limit.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceTable {
    pub shape: Vec<usize>,
    pub h: f64,
    pub reference_node: usize,
    pub rows: Vec<TableRow>,
    /// Node-wise extrapolation of the normalized family to zero discount.
    /// Its `residual` field holds the ergodic defect at level `c_used`.
    pub limit_estimate: ValueFunction,
    /// Critical value used for normalization (the subsolution program's).
    pub c_used: f64,
    /// The last delta fell below `delta_threshold`.
    pub converged: bool,
    pub delta_threshold: f64,
    /// Deltas non-increasing within the allowed slack factor.
    pub deltas_monotone: bool,
}

/// Critical values by the three routes with the tolerances they were gated
/// against.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RouteSummary {
    pub vanishing: f64,
    pub subsolution: f64,
    pub measure: f64,
    /// Bound on |vanishing - subsolution|.
    pub vanishing_tol: f64,
    /// Bound on |subsolution - measure|.
    pub duality_tol: f64,
}

/// Pairings of the optimal measures against the limit profile.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SelectionReport {
    /// `max(10h, 10 * lambda_min)`.
    pub tol: f64,
    pub lambda_min: f64,
    /// Limit paired with the stationary optimal measure; must be <= tol.
    pub mather_pairing: f64,
    /// Limit paired with the reference node's discounted measure; |.| <= tol.
    pub green_pairing: f64,
    /// Stationarity defect of that discounted measure (decays like lambda).
    pub green_stationarity_residual: f64,
    pub satisfied: bool,
}

/// Discrete Lipschitz quotients of a solution family.
#[derive(Clone, Debug, Serialize)]
pub struct ModulusReport {
    /// `(lambda, max quotient)` per family member, in schedule order.
    pub quotients: Vec<(f64, f64)>,
    pub max_quotient: f64,
    /// Quotients grew past the allowed factor as the discount shrank —
    /// the family may not be equicontinuous.
    pub growth_flagged: bool,
}

/// Full study outcome; serializes to `report.json`.
#[derive(Clone, Debug, Serialize)]
pub struct StudyReport {
    pub problem: String,
    pub bc: BcKind,
    pub shapes: Vec<Vec<usize>>,
    pub schedule: Vec<f64>,
    /// Reference node on the finest grid.
    pub reference_node: usize,
    /// RNG seed recorded for reproducible follow-up sampling.
    pub seed: u64,
    /// Critical value the normalization used (finest grid).
    pub c_used: f64,
    pub routes: RouteSummary,
    pub dichotomy: Option<Dichotomy>,
    pub tables: Vec<ConvergenceTable>,
    /// Stationary optimal measure on the finest grid.
    pub mather: MeasurePair,
    pub mather_objective: f64,
    pub selection: SelectionReport,
    pub equicontinuity: ModulusReport,
    pub warnings: Vec<String>,
}

/// Gate the three critical values against each other. Returns the two
/// tolerances used, or the comparison report as an error.
pub(crate) fn check_route_agreement(
    name: &str,
    h: f64,
    c_van: f64,
    c_sub: f64,
    c_mea: f64,
    overrides: (Option<f64>, Option<f64>),
) -> Result<(f64, f64)> {
    let tol_van = overrides.0.unwrap_or(ROUTE_AGREEMENT_TOL.max(10.0 * h));
    let tol_dual = overrides.1.unwrap_or(EXACT_DUAL_TOL);
    let dv = (c_van - c_sub).abs();
    let dm = (c_sub - c_mea).abs();
    if dv > tol_van || dm > tol_dual {
        return Err(Error::RouteDisagreement(format!(
            "{name}: vanishing {c_van:.6}, subsolution {c_sub:.6}, measure {c_mea:.6}; \
             |vanishing-subsolution| = {dv:.3e} (tol {tol_van:.3e}), \
             |subsolution-measure| = {dm:.3e} (tol {tol_dual:.3e})"
        )));
    }
    Ok((tol_van, tol_dual))
}

/// Solve the whole discount schedule, splitting it over `jobs` workers
/// (0 = one per CPU). Results come back in schedule order regardless of the
/// worker count, so tables are deterministic.
fn solve_family(
    op: &DiscreteOperator,
    schedule: &[f64],
    jobs: usize,
) -> Result<Vec<ValueFunction>> {
    let workers = if jobs == 0 {
        std::thread::available_parallelism().map(|p| p.get()).unwrap_or(1)
    } else {
        jobs
    };
    let workers = workers.clamp(1, schedule.len().max(1));
    let solve_one = |l: f64| -> Result<ValueFunction> {
        policy_iteration(op, l, POLICY_ITERATION_MAX_ROUNDS).map(|(v, _)| v)
    };
    if workers == 1 {
        return schedule.iter().map(|&l| solve_one(l)).collect();
    }
    let mut slots: Vec<Option<Result<ValueFunction>>> = Vec::new();
    slots.resize_with(schedule.len(), || None);
    let chunk = schedule.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (lams, out) in schedule.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (&l, slot) in lams.iter().zip(out.iter_mut()) {
                    *slot = Some(solve_one(l));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every schedule slot is assigned to a worker")).collect()
}

/// Nodes that count toward sup-norm deltas. Oblique corner stencils on 2D
/// rectangles force a direction convention, so reflected problems exclude a
/// two-step collar around every corner from the norms.
fn sup_mask(grid: &Grid, bc: BcKind) -> Vec<bool> {
    let mut mask = vec![true; grid.n_nodes];
    if grid.dim == 2 && bc == BcKind::Neumann {
        for (node, keep) in mask.iter_mut().enumerate() {
            let ix = node % grid.shape[0];
            let iy = node / grid.shape[0];
            let ex = ix.min(grid.shape[0] - 1 - ix);
            let ey = iy.min(grid.shape[1] - 1 - iy);
            if ex <= 2 && ey <= 2 {
                *keep = false;
            }
        }
    }
    mask
}

fn sup_delta(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    a.iter()
        .zip(b)
        .zip(mask)
        .filter(|&(_, &keep)| keep)
        .map(|((x, y), _)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Max discrete Lipschitz quotient per family member, with a growth flag.
/// Advisory: a single solution degenerates to its own Lipschitz constant,
/// and an empty family to zeros.
pub fn equicontinuity_probe(grid: &Grid, solutions: &[ValueFunction]) -> ModulusReport {
    let mut quotients = Vec::with_capacity(solutions.len());
    for sol in solutions {
        let mut q = 0.0f64;
        for node in 0..grid.n_nodes {
            for axis in 0..grid.dim {
                if let Some(j) = grid.neighbor(node, axis, 1) {
                    q = q.max((sol.values[j] - sol.values[node]).abs() / grid.h[axis]);
                }
            }
        }
        quotients.push((sol.lambda, q));
    }
    let max_quotient = quotients.iter().map(|&(_, q)| q).fold(0.0, f64::max);
    let growth_flagged = quotients.len() >= 2
        && max_quotient > EQUICONTINUITY_GROWTH_FACTOR * quotients[0].1 + 1e-9;
    ModulusReport { quotients, max_quotient, growth_flagged }
}

struct ShapeOutcome {
    op: DiscreteOperator,
    family: Vec<ValueFunction>,
    normalized: Vec<Vec<f64>>,
    routes: RouteSummary,
    dichotomy: Option<Dichotomy>,
    reference_node: usize,
    c_used: f64,
}

fn run_shape(
    config: &StudyConfig,
    shape: &[usize],
    warnings: &mut Vec<String>,
) -> Result<(ConvergenceTable, ShapeOutcome)> {
    let spec = &config.spec;
    let op = build_scheme(spec, shape)?;
    let n = op.grid.n_nodes;
    let z = match config.reference_node {
        Some(z) if z < n => z,
        Some(z) => {
            return Err(Error::Config(format!(
                "reference node {z} out of range for shape {shape:?} ({n} nodes)"
            )))
        }
        None => op.grid.center_node(),
    };
    let lambda_min = *config.schedule.last().expect("validated schedule is nonempty");

    let family = solve_family(&op, &config.schedule, config.jobs)?;
    let levels: Vec<(f64, f64)> = config
        .schedule
        .iter()
        .zip(&family)
        .map(|(&l, v)| (l, l * v.values[z]))
        .collect();
    let c_van = -extrapolate_to_zero(&levels);
    let sub = critical_value_subsolution_lp(&op)?;
    let mea = critical_value_measure_lp(&op, z)?;
    let (tol_van, tol_dual) = check_route_agreement(
        &spec.name,
        op.h(),
        c_van,
        sub.c,
        mea.c,
        (config.vanishing_tol, config.duality_tol),
    )?;
    let routes = RouteSummary {
        vanishing: c_van,
        subsolution: sub.c,
        measure: mea.c,
        vanishing_tol: tol_van,
        duality_tol: tol_dual,
    };
    let c_used = sub.c;

    let mask = sup_mask(&op.grid, op.bc_kind);
    let normalized: Vec<Vec<f64>> = config
        .schedule
        .iter()
        .zip(&family)
        .map(|(&l, v)| v.values.iter().map(|&u| u + c_used / l).collect())
        .collect();

    let mut rows = Vec::with_capacity(family.len());
    let mut deltas = Vec::new();
    for (k, (&(lambda, level), v)) in levels.iter().zip(&family).enumerate() {
        let delta = if k == 0 {
            None
        } else {
            let d = sup_delta(&normalized[k], &normalized[k - 1], &mask);
            deltas.push(d);
            Some(d)
        };
        rows.push(TableRow { lambda, level, delta, residual: v.residual, rounds: v.sweeps });
    }

    let mut deltas_monotone = true;
    for w in deltas.windows(2) {
        if w[1] > DELTA_MONOTONE_SLACK * w[0] + 1e-12 {
            deltas_monotone = false;
        }
    }
    if !deltas_monotone {
        warnings.push(format!(
            "{}, shape {shape:?}: normalized sup deltas are not non-increasing \
             (factor-{DELTA_MONOTONE_SLACK} slack)",
            spec.name
        ));
    }
    let delta_threshold = (STUDY_DELTA_H_FACTOR * op.h()).max(STUDY_DELTA_FLOOR);
    let converged = deltas.last().is_some_and(|&d| d < delta_threshold);

    let m = config.schedule.len();
    let mut limit = vec![0.0f64; n];
    for (i, li) in limit.iter_mut().enumerate() {
        let pts: Vec<(f64, f64)> =
            (m - 3..m).map(|k| (config.schedule[k], normalized[k][i])).collect();
        *li = extrapolate_to_zero(&pts);
    }
    let limit_residual = ergodic_residual(&op, &limit, c_used);
    let residual_bound = (SELECTION_TOL_FACTOR * op.h()).max(SELECTION_TOL_FACTOR * lambda_min);
    if limit_residual > residual_bound {
        warnings.push(format!(
            "{}, shape {shape:?}: limit ergodic residual {limit_residual:.3e} exceeds \
             {residual_bound:.3e}",
            spec.name
        ));
    }
    let limit_estimate = ValueFunction {
        lambda: 0.0,
        values: limit,
        sweeps: 0,
        residual: limit_residual,
        contraction: None,
    };

    let table = ConvergenceTable {
        shape: shape.to_vec(),
        h: op.h(),
        reference_node: z,
        rows,
        limit_estimate,
        c_used,
        converged,
        delta_threshold,
        deltas_monotone,
    };
    let outcome = ShapeOutcome {
        op,
        family,
        normalized,
        routes,
        dichotomy: sub.dichotomy,
        reference_node: z,
        c_used,
    };
    Ok((table, outcome))
}

/// Run the full experiment: per-shape discount sweeps with route-gated
/// critical values, limit extrapolation, measure pairings on the finest
/// grid, an equicontinuity probe, and (optionally) artifact files.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    validate_schedule(&config.schedule)?;
    if config.shapes.is_empty() {
        return Err(Error::Config("study needs at least one grid shape".into()));
    }
    let lambda_min = *config.schedule.last().expect("validated schedule is nonempty");

    let mut warnings = Vec::new();
    let mut tables = Vec::with_capacity(config.shapes.len());
    let mut headline = None;
    for shape in &config.shapes {
        let (table, outcome) = run_shape(config, shape, &mut warnings)?;
        tables.push(table);
        headline = Some(outcome);
    }
    let head = headline.expect("at least one shape was run");
    let finest = tables.last().expect("one table per shape");

    let mather = mather_measure(&head.op)?;
    let green = green_measure(&head.op, head.reference_node, lambda_min)?;
    let limit = &finest.limit_estimate.values;
    let tol_select = (SELECTION_TOL_FACTOR * head.op.h()).max(SELECTION_TOL_FACTOR * lambda_min);
    let mather_pairing = mather.measure.node_pairing(limit);
    let green_pairing = green.measure.node_pairing(limit);
    let green_stationarity_residual = stationarity_residual(&head.op, &green.measure);
    let satisfied = mather_pairing <= tol_select && green_pairing.abs() <= tol_select;
    if !satisfied {
        warnings.push(format!(
            "{}: selection inequality failed (stationary pairing {mather_pairing:.3e}, \
             discounted pairing {green_pairing:.3e}, tol {tol_select:.3e})",
            config.spec.name
        ));
    }
    if green_stationarity_residual > SELECTION_TOL_FACTOR * lambda_min {
        warnings.push(format!(
            "{}: discounted measure stationarity residual {green_stationarity_residual:.3e} \
             exceeds {:.3e}",
            config.spec.name,
            SELECTION_TOL_FACTOR * lambda_min
        ));
    }
    let selection = SelectionReport {
        tol: tol_select,
        lambda_min,
        mather_pairing,
        green_pairing,
        green_stationarity_residual,
        satisfied,
    };

    let equicontinuity = equicontinuity_probe(&head.op.grid, &head.family);
    if equicontinuity.growth_flagged {
        warnings.push(format!(
            "{}: Lipschitz quotients grow across the schedule (max {:.3e}); the family may \
             not be equicontinuous",
            config.spec.name, equicontinuity.max_quotient
        ));
    }

    let report = StudyReport {
        problem: config.spec.name.clone(),
        bc: head.op.bc_kind,
        shapes: config.shapes.clone(),
        schedule: config.schedule.clone(),
        reference_node: head.reference_node,
        seed: config.seed,
        c_used: head.c_used,
        routes: head.routes,
        dichotomy: head.dichotomy,
        tables,
        mather: mather.measure.clone(),
        mather_objective: mather.objective,
        selection,
        equicontinuity,
        warnings,
    };

    if let Some(dir) = &config.output_dir {
        write_artifacts(dir, &report, &head.op.grid, &config.schedule, &head.normalized)?;
    }
    Ok(report)
}

fn shape_label(shape: &[usize]) -> String {
    shape.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("x")
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|d| d.to_string()).unwrap_or_default()
}

/// Write `table.csv`, `limit.csv`, `mather_measure.csv`, `report.json`, and
/// one gnuplot `profile_<lambda>.dat` per discount (normalized family on the
/// finest grid). Plain `Display` float formatting keeps reruns byte-identical.
fn write_artifacts(
    dir: &Path,
    report: &StudyReport,
    grid: &Grid,
    schedule: &[f64],
    normalized: &[Vec<f64>],
) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut table = String::from("shape,lambda,level,delta,residual,rounds\n");
    for t in &report.tables {
        let label = shape_label(&t.shape);
        for row in &t.rows {
            let _ = writeln!(
                table,
                "{label},{},{},{},{},{}",
                row.lambda,
                row.level,
                csv_opt(row.delta),
                row.residual,
                row.rounds
            );
        }
    }
    fs::write(dir.join("table.csv"), table)?;

    let finest = report.tables.last().expect("report carries at least one table");
    let mut limit = String::from(if grid.dim == 1 { "x,value\n" } else { "x,y,value\n" });
    for (node, &v) in finest.limit_estimate.values.iter().enumerate() {
        let p = grid.point(node);
        if grid.dim == 1 {
            let _ = writeln!(limit, "{},{v}", p[0]);
        } else {
            let _ = writeln!(limit, "{},{},{v}", p[0], p[1]);
        }
    }
    fs::write(dir.join("limit.csv"), limit)?;

    let mut measure = String::from("node,control,weight\n");
    for &(node, control, w) in &report.mather.mu1 {
        let _ = writeln!(measure, "{node},{control},{w}");
    }
    for &(pos, w) in &report.mather.mu2 {
        let _ = writeln!(measure, "{pos},,{w}");
    }
    fs::write(dir.join("mather_measure.csv"), measure)?;

    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
    fs::write(dir.join("report.json"), json + "\n")?;

    for (&lambda, values) in schedule.iter().zip(normalized) {
        let mut dat = String::new();
        for (node, &v) in values.iter().enumerate() {
            let p = grid.point(node);
            if grid.dim == 1 {
                let _ = writeln!(dat, "{} {v}", p[0]);
            } else {
                if node > 0 && node % grid.shape[0] == 0 {
                    dat.push('\n');
                }
                let _ = writeln!(dat, "{} {} {v}", p[0], p[1]);
            }
        }
        fs::write(dir.join(format!("profile_{lambda}.dat")), dat)?;
    }
    Ok(())
}
