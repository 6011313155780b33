//! `hjb` — command-line front end for the solver library.
//!
//! Subcommands: `validate`, `solve`, `ergodic`, `measures`, `study`. Problems
//! come either from the built-in benchmark catalog (`--catalog` with `--m`
//! and `--bc`) or from a TOML description (`--config`, schema in
//! `docs/problem-config.md`).
//!
//! Exit codes: 0 success; 1 validation or configuration failure (including
//! command-line usage errors); 2 solver or LP failure; 3 route disagreement
//! inside a study. Human-readable summaries go to standard output; machine
//! artifacts go to `--output-dir` (or `$HJB_OUTPUT_DIR`; with neither set,
//! nothing is written).

mod config;
mod output;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hjb_core::constants::{
    DEFAULT_SCHEDULE, DEFAULT_SEED, DEFAULT_SHAPE_1D, DEFAULT_SHAPE_2D,
    POLICY_ITERATION_MAX_ROUNDS, VALUE_ITERATION_MAX_SWEEPS, VALUE_ITERATION_TOL,
};
use hjb_core::{
    build_scheme, constant_cost, critical_value_measure_lp, critical_value_subsolution_lp,
    critical_value_vanishing_discount, duality_gap, eikonal_1d, green_measure, mather_measure,
    policy_iteration, run_study, validate_spec, value_iteration, viscous_quadratic_1d, BcKind,
    DiscreteOperator, ErgodicResult, Error, ProblemSpec, Result, StudyConfig, ValueFunction,
};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "hjb",
    version,
    about = "Discounted Bellman boundary-value problems: monotone schemes, \
             occupation-measure LPs, and vanishing-discount studies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a problem description against the scheme's structural requirements
    Validate(ValidateArgs),
    /// Solve one discounted problem and report the value at a reference node
    Solve(SolveArgs),
    /// Critical value by three routes, with boundary-regime classification
    Ergodic(ErgodicArgs),
    /// Optimal occupation measures and the discounted duality audit
    Measures(MeasuresArgs),
    /// Vanishing-discount study: convergence tables, limit profile, artifacts
    Study(StudyArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BcArg {
    /// Solutions constrained to the closure; no boundary data
    #[value(name = "state_constraint", alias = "sc")]
    StateConstraint,
    /// Exit clamp against a constant datum
    Dirichlet,
    /// Oblique reflection with a constant normal flux
    Neumann,
}

impl From<BcArg> for BcKind {
    fn from(bc: BcArg) -> BcKind {
        match bc {
            BcArg::StateConstraint => BcKind::StateConstraint,
            BcArg::Dirichlet => BcKind::Dirichlet,
            BcArg::Neumann => BcKind::Neumann,
        }
    }
}

/// Where the problem comes from: a catalog family or a TOML file.
#[derive(Args)]
struct SpecSource {
    /// Benchmark family: eikonal_1d, viscous_quadratic_1d, or constant_cost
    #[arg(long, value_name = "FAMILY", conflicts_with = "config")]
    catalog: Option<String>,

    /// Family parameter: slope m for eikonal_1d, cost level for constant_cost
    #[arg(long, value_name = "M", requires = "catalog", allow_negative_numbers = true, default_value_t = 1.0)]
    m: f64,

    /// Boundary condition for catalog problems
    #[arg(long, value_enum, requires = "catalog", default_value_t = BcArg::StateConstraint)]
    bc: BcArg,

    /// TOML problem description (schema: docs/problem-config.md)
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
}

impl SpecSource {
    fn resolve(&self) -> Result<ProblemSpec> {
        match (&self.catalog, &self.config) {
            (Some(name), None) => {
                let bc = self.bc.into();
                match name.as_str() {
                    "eikonal_1d" => Ok(eikonal_1d(self.m, bc)),
                    "viscous_quadratic_1d" => Ok(viscous_quadratic_1d(bc)),
                    "constant_cost" => Ok(constant_cost(self.m, bc)),
                    other => Err(Error::Config(format!(
                        "unknown catalog family {other:?} (available: eikonal_1d, \
                         viscous_quadratic_1d, constant_cost)"
                    ))),
                }
            }
            (None, Some(path)) => config::load_problem(path),
            (None, None) => {
                Err(Error::Config("give a problem via --catalog or --config".into()))
            }
            (Some(_), Some(_)) => unreachable!("clap rejects --catalog with --config"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    /// Howard policy improvement with banded policy evaluation
    Policy,
    /// Damped fixed-point sweeps
    Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    source: SpecSource,
    /// Probe lattice, e.g. "401" or "41x41" (default: a coarse probe)
    #[arg(long, value_name = "SHAPE")]
    shape: Option<String>,
    /// Directory for validation.json (default: $HJB_OUTPUT_DIR; unset = no files)
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    source: SpecSource,
    /// Discount factor (> 0)
    #[arg(long, value_name = "LAMBDA")]
    lambda: f64,
    /// Grid nodes per axis, e.g. "401" or "41x41"
    #[arg(long, value_name = "SHAPE")]
    shape: Option<String>,
    /// Reference node index (default: the grid's center node)
    #[arg(long, value_name = "NODE")]
    z: Option<usize>,
    #[arg(long, value_enum, default_value_t = Method::Policy)]
    method: Method,
    /// Residual tolerance (value iteration only)
    #[arg(long, value_name = "TOL", default_value_t = VALUE_ITERATION_TOL)]
    tol: f64,
    /// Iteration budget: sweeps (value) or improvement rounds (policy)
    #[arg(long, value_name = "N")]
    max_iter: Option<usize>,
    /// Layout of the solution artifact
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Directory for the solution artifact (default: $HJB_OUTPUT_DIR)
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ErgodicArgs {
    #[command(flatten)]
    source: SpecSource,
    /// Grid nodes per axis, e.g. "401" or "41x41"
    #[arg(long, value_name = "SHAPE")]
    shape: Option<String>,
    /// Decreasing discount schedule, e.g. "1e-1,3e-2,1e-2,3e-3,1e-3"
    #[arg(long, value_name = "LIST")]
    schedule: Option<String>,
    /// Reference node index (default: the grid's center node)
    #[arg(long, value_name = "NODE")]
    z: Option<usize>,
    /// Directory for ergodic.json and corrector.csv (default: $HJB_OUTPUT_DIR)
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct MeasuresArgs {
    #[command(flatten)]
    source: SpecSource,
    /// Grid nodes per axis, e.g. "401" or "41x41"
    #[arg(long, value_name = "SHAPE")]
    shape: Option<String>,
    /// Also solve the discounted program at this discount and audit duality
    #[arg(long, value_name = "LAMBDA")]
    lambda: Option<f64>,
    /// Reference node for the discounted program (default: center node)
    #[arg(long, value_name = "NODE")]
    z: Option<usize>,
    /// Directory for measure CSVs and measures.json (default: $HJB_OUTPUT_DIR)
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    source: SpecSource,
    /// Grid shape, repeatable coarse to fine, e.g. --shape 201 --shape 401
    #[arg(long, value_name = "SHAPE")]
    shape: Vec<String>,
    /// Decreasing discount schedule, e.g. "1e-1,3e-2,1e-2,3e-3,1e-3"
    #[arg(long, value_name = "LIST")]
    schedule: Option<String>,
    /// Reference node index (default: each grid's center node)
    #[arg(long, value_name = "NODE")]
    z: Option<usize>,
    /// Artifact directory (default: $HJB_OUTPUT_DIR; unset = in-memory run)
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// RNG seed recorded in report.json
    #[arg(long, value_name = "SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Worker threads for per-discount solves (0 = one per CPU)
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
    /// Override the |vanishing - subsolution| agreement bound
    #[arg(long, value_name = "TOL")]
    vanishing_tol: Option<f64>,
    /// Override the |subsolution - measure| exact-duality bound
    #[arg(long, value_name = "TOL")]
    duality_tol: Option<f64>,
}

fn main() -> ExitCode {
    // Keep the whole exit-code surface at {0, 1, 2, 3}: usage errors are
    // configuration errors (1), help/version print and exit 0.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation(_)
        | Error::Config(_)
        | Error::Domain(_)
        | Error::Build(_)
        | Error::Monotonicity { .. }
        | Error::Io(_) => 1,
        Error::Convergence { .. }
        | Error::Solver(_)
        | Error::LpInfeasible(_)
        | Error::LpUnbounded(_)
        | Error::LpNumerics(_)
        | Error::Coercivity(_) => 2,
        Error::RouteDisagreement(_) => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate(args) => run_validate(args),
        Command::Solve(args) => run_solve(args),
        Command::Ergodic(args) => run_ergodic(args),
        Command::Measures(args) => run_measures(args),
        Command::Study(args) => run_study_cmd(args),
    }
}

/// Parse "401", "41x41", or "41,41" into per-axis node counts.
fn parse_shape(text: &str) -> Result<Vec<usize>> {
    let cells: Vec<&str> = text.split(['x', ',']).map(str::trim).collect();
    let shape: Vec<usize> = cells
        .iter()
        .map(|c| c.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| {
            Error::Config(format!("bad shape {text:?} (expected e.g. \"401\" or \"41x41\")"))
        })?;
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::Config(format!("shape {text:?} must have one or two axes")));
    }
    Ok(shape)
}

/// The grid shape to use: the flag if given, else a dimension-matched default.
fn resolve_shape(dim: usize, flag: &Option<String>) -> Result<Vec<usize>> {
    match flag {
        Some(text) => {
            let shape = parse_shape(text)?;
            if shape.len() != dim {
                return Err(Error::Config(format!(
                    "shape {text:?} has {} axes but the problem has {dim}",
                    shape.len()
                )));
            }
            Ok(shape)
        }
        None => Ok(match dim {
            1 => vec![DEFAULT_SHAPE_1D],
            _ => vec![DEFAULT_SHAPE_2D, DEFAULT_SHAPE_2D],
        }),
    }
}

fn parse_schedule(flag: &Option<String>) -> Result<Vec<f64>> {
    match flag {
        Some(text) => text
            .split(',')
            .map(|c| {
                c.trim().parse::<f64>().map_err(|_| {
                    Error::Config(format!("bad schedule entry {:?} in {text:?}", c.trim()))
                })
            })
            .collect(),
        None => Ok(DEFAULT_SCHEDULE.to_vec()),
    }
}

fn reference_node(op: &DiscreteOperator, flag: Option<usize>) -> Result<usize> {
    let z = flag.unwrap_or_else(|| op.grid.center_node());
    if z >= op.grid.n_nodes {
        return Err(Error::Config(format!(
            "reference node {z} out of range ({} nodes)",
            op.grid.n_nodes
        )));
    }
    Ok(z)
}

fn describe(spec: &ProblemSpec, shape: &[usize]) {
    let dims: Vec<String> = shape.iter().map(|s| s.to_string()).collect();
    println!(
        "problem   {} ({} controls), grid {}",
        spec.name,
        spec.controls.len(),
        dims.join("x")
    );
}

fn run_validate(args: ValidateArgs) -> Result<()> {
    let spec = args.source.resolve()?;
    let shape = args.shape.as_ref().map(|s| parse_shape(s)).transpose()?;
    if let Some(shape) = &shape {
        if shape.len() != spec.dim() {
            return Err(Error::Config(format!(
                "shape has {} axes but the problem has {}",
                shape.len(),
                spec.dim()
            )));
        }
    }
    let report = validate_spec(&spec, shape.as_deref());
    println!("problem   {}", spec.name);
    print!("{report}");

    if let Some(dir) = output::resolve_output_dir(args.output_dir) {
        output::ensure_dir(&dir)?;
        output::write_json(&dir.join("validation.json"), &report)?;
    }

    let failed = report.checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(Error::Validation(format!(
            "{failed} of {} checks failed",
            report.checks.len()
        )));
    }
    println!("all {} checks passed", report.checks.len());
    Ok(())
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    problem: &'a str,
    shape: &'a [usize],
    method: &'a str,
    z: usize,
    z_point: Vec<f64>,
    value_at_z: f64,
    discounted_level: f64,
    #[serde(flatten)]
    solution: &'a ValueFunction,
}

fn run_solve(args: SolveArgs) -> Result<()> {
    let spec = args.source.resolve()?;
    let shape = resolve_shape(spec.dim(), &args.shape)?;
    let op = build_scheme(&spec, &shape)?;
    let z = reference_node(&op, args.z)?;
    describe(&spec, &shape);

    let (vf, method) = match args.method {
        Method::Policy => {
            let rounds = args.max_iter.unwrap_or(POLICY_ITERATION_MAX_ROUNDS);
            (policy_iteration(&op, args.lambda, rounds)?.0, "policy")
        }
        Method::Value => {
            let sweeps = args.max_iter.unwrap_or(VALUE_ITERATION_MAX_SWEEPS);
            (value_iteration(&op, args.lambda, args.tol, sweeps)?, "value")
        }
    };

    let level = args.lambda * vf.values[z];
    println!("method    {method} iteration, {} rounds, residual {:.3e}", vf.sweeps, vf.residual);
    println!("z         node {z} at {:?}", &op.grid.point(z)[..op.grid.dim]);
    println!("v(z)      {}", vf.values[z]);
    println!("lambda*v(z) = {level}");

    if let Some(dir) = output::resolve_output_dir(args.output_dir) {
        output::ensure_dir(&dir)?;
        match args.format {
            Format::Csv => {
                output::write_text(
                    &dir.join("solution.csv"),
                    &output::field_csv(&op.grid, &vf.values),
                )?;
            }
            Format::Json => {
                let summary = SolveSummary {
                    problem: &spec.name,
                    shape: &shape,
                    method,
                    z,
                    z_point: op.grid.point(z)[..op.grid.dim].to_vec(),
                    value_at_z: vf.values[z],
                    discounted_level: level,
                    solution: &vf,
                };
                output::write_json(&dir.join("solution.json"), &summary)?;
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ErgodicSummary<'a> {
    problem: &'a str,
    shape: &'a [usize],
    schedule: &'a [f64],
    vanishing: &'a ErgodicResult,
    subsolution: &'a ErgodicResult,
    measure: &'a ErgodicResult,
}

fn print_route(tag: &str, r: &ErgodicResult) {
    let mut line = format!("{tag:<22} c = {:+.9}", r.c);
    if let Some(d) = r.d_star {
        line.push_str(&format!("   (subsolution level d* = {d:+.9})"));
    }
    if let Some(dich) = r.dichotomy {
        line.push_str(&format!("   {dich:?}"));
    }
    println!("{line}");
}

fn run_ergodic(args: ErgodicArgs) -> Result<()> {
    let spec = args.source.resolve()?;
    let shape = resolve_shape(spec.dim(), &args.shape)?;
    let schedule = parse_schedule(&args.schedule)?;
    let op = build_scheme(&spec, &shape)?;
    let z = reference_node(&op, args.z)?;
    describe(&spec, &shape);

    let vanishing = critical_value_vanishing_discount(&op, &schedule)?;
    let subsolution = critical_value_subsolution_lp(&op)?;
    let measure = critical_value_measure_lp(&op, z)?;

    print_route("vanishing discount", &vanishing);
    print_route("subsolution LP", &subsolution);
    print_route("measure LP", &measure);
    println!(
        "spread    |vanishing - subsolution| = {:.3e}, |subsolution - measure| = {:.3e}",
        (vanishing.c - subsolution.c).abs(),
        (subsolution.c - measure.c).abs()
    );

    if let Some(dir) = output::resolve_output_dir(args.output_dir) {
        output::ensure_dir(&dir)?;
        let summary = ErgodicSummary {
            problem: &spec.name,
            shape: &shape,
            schedule: &schedule,
            vanishing: &vanishing,
            subsolution: &subsolution,
            measure: &measure,
        };
        output::write_json(&dir.join("ergodic.json"), &summary)?;
        output::write_text(
            &dir.join("corrector.csv"),
            &output::field_csv(&op.grid, &vanishing.corrector.values),
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MeasuresSummary<'a> {
    problem: &'a str,
    shape: &'a [usize],
    mather: &'a hjb_core::LpSolution,
    green: Option<&'a hjb_core::LpSolution>,
    duality: Option<&'a hjb_core::GapReport>,
}

fn run_measures(args: MeasuresArgs) -> Result<()> {
    let spec = args.source.resolve()?;
    let shape = resolve_shape(spec.dim(), &args.shape)?;
    let op = build_scheme(&spec, &shape)?;
    describe(&spec, &shape);

    let mather = mather_measure(&op)?;
    println!(
        "mather    objective {:+.9} (critical value c = {:+.9}), interior mass {:.9}, \
         {} interior atoms",
        mather.objective,
        -mather.objective,
        mather.measure.mu1_mass,
        mather.measure.mu1.len()
    );

    let mut green = None;
    let mut gap = None;
    if let Some(lambda) = args.lambda {
        let z = reference_node(&op, args.z)?;
        let sol = green_measure(&op, z, lambda)?;
        println!(
            "green     lambda {lambda}, z = node {z}: objective {:+.9}, masses {:.9} + {:.9}, \
             {} interior atoms",
            sol.objective,
            sol.measure.mu1_mass,
            sol.measure.mu2_mass,
            sol.measure.mu1.len()
        );
        let audit = duality_gap(&op, z, lambda)?;
        println!(
            "duality   |lambda*v(z) - objective| = {:.3e}, worst active slack {:.3e}",
            audit.gap, audit.max_active_slack
        );
        green = Some(sol);
        gap = Some(audit);
    }

    if let Some(dir) = output::resolve_output_dir(args.output_dir) {
        output::ensure_dir(&dir)?;
        output::write_text(
            &dir.join("mather_measure.csv"),
            &output::measure_csv(&mather.measure),
        )?;
        if let Some(sol) = &green {
            output::write_text(
                &dir.join("green_measure.csv"),
                &output::measure_csv(&sol.measure),
            )?;
        }
        let summary = MeasuresSummary {
            problem: &spec.name,
            shape: &shape,
            mather: &mather,
            green: green.as_ref(),
            duality: gap.as_ref(),
        };
        output::write_json(&dir.join("measures.json"), &summary)?;
    }
    Ok(())
}

fn run_study_cmd(args: StudyArgs) -> Result<()> {
    let spec = args.source.resolve()?;
    let dim = spec.dim();
    let mut config = StudyConfig::new(spec);
    if !args.shape.is_empty() {
        let mut shapes = Vec::with_capacity(args.shape.len());
        for text in &args.shape {
            let shape = parse_shape(text)?;
            if shape.len() != dim {
                return Err(Error::Config(format!(
                    "shape {text:?} has {} axes but the problem has {dim}",
                    shape.len()
                )));
            }
            shapes.push(shape);
        }
        config.shapes = shapes;
    }
    config.schedule = parse_schedule(&args.schedule)?;
    config.reference_node = args.z;
    config.output_dir = output::resolve_output_dir(args.output_dir);
    config.seed = args.seed;
    config.jobs = args.jobs;
    config.vanishing_tol = args.vanishing_tol;
    config.duality_tol = args.duality_tol;

    let report = run_study(&config)?;

    println!("problem   {} on shapes {:?}", report.problem, report.shapes);
    println!(
        "routes    vanishing {:+.9}, subsolution {:+.9}, measure {:+.9}",
        report.routes.vanishing, report.routes.subsolution, report.routes.measure
    );
    println!("c         {:+.9} (subsolution route, finest grid)", report.c_used);
    if let Some(d) = report.dichotomy {
        println!("regime    {d:?}");
    }
    for table in &report.tables {
        println!(
            "table     shape {:?}: {} discounts, converged = {}, last delta {:.3e}, \
             limit ergodic residual {:.3e}",
            table.shape,
            table.rows.len(),
            table.converged,
            table.rows.last().and_then(|r| r.delta).unwrap_or(f64::NAN),
            table.limit_estimate.residual
        );
    }
    println!(
        "selection |<mu1, u>| = {:.3e} (tol {:.3e}), green pairing {:.3e}, satisfied = {}",
        report.selection.mather_pairing.abs(),
        report.selection.tol,
        report.selection.green_pairing.abs(),
        report.selection.satisfied
    );
    println!(
        "measure   interior mass {:.9}, {} atoms; objective {:+.9}",
        report.mather.mu1_mass,
        report.mather.mu1.len(),
        report.mather_objective
    );
    for w in &report.warnings {
        println!("warning   {w}");
    }
    match &config.output_dir {
        Some(dir) => println!("artifacts {}", dir.display()),
        None => println!("artifacts none (set --output-dir or HJB_OUTPUT_DIR to write files)"),
    }
    Ok(())
}
