//! Shared numeric defaults. Every tolerance and default mesh parameter used
//! by the solvers, the LPs, and the CLI lives here so runs are reproducible
//! from one place.

/// Default number of grid nodes per axis for 1D problems.
pub const DEFAULT_SHAPE_1D: usize = 401;
/// Default number of grid nodes per axis for 2D problems.
pub const DEFAULT_SHAPE_2D: usize = 101;
/// Default number of control samples per control axis.
pub const DEFAULT_CONTROL_SAMPLES: usize = 41;

/// Sup-norm residual tolerance for value iteration.
pub const VALUE_ITERATION_TOL: f64 = 1e-10;
/// Hard cap on value-iteration sweeps.
pub const VALUE_ITERATION_MAX_SWEEPS: usize = 2_000_000;
/// Hard cap on policy-improvement rounds.
pub const POLICY_ITERATION_MAX_ROUNDS: usize = 500;
/// Residual tolerance for accepting a policy-iteration fixed point.
pub const POLICY_ITERATION_TOL: f64 = 1e-11;

/// Default vanishing-discount schedule (geometric-ish, down to 1e-3).
pub const DEFAULT_SCHEDULE: [f64; 5] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3];
/// Discount used by `corrector` when reconstructing the normalized limit.
pub const CORRECTOR_LAMBDA_MIN: f64 = 1e-3;

/// Simplex pivot magnitude floor.
pub const LP_PIVOT_TOL: f64 = 1e-9;
/// Reduced-cost threshold for optimality.
pub const LP_REDUCED_COST_TOL: f64 = 1e-9;
/// Primal feasibility residual an `Optimal` LP solution must satisfy.
pub const LP_FEASIBILITY_TOL: f64 = 1e-9;
/// Complementary-slackness residual an `Optimal` LP solution must satisfy.
pub const LP_SLACKNESS_TOL: f64 = 1e-8;
/// Consecutive degenerate pivots before switching to Bland's rule.
pub const LP_STALL_THRESHOLD: usize = 40;
/// Pivots between basis refactorizations.
pub const LP_REFACTOR_PERIOD: usize = 32;

/// Tolerance for the discounted duality identity `lambda v(z) = <mu, costs>`.
pub const DUALITY_GAP_TOL: f64 = 1e-8;
/// Tolerance for agreement between the subsolution LP and the measure LP.
pub const EXACT_DUAL_TOL: f64 = 1e-6;
/// Tolerance for agreement between the vanishing-discount route and the LPs.
pub const ROUTE_AGREEMENT_TOL: f64 = 5e-2;
/// Slack allowed in dual-cone membership checks.
pub const CONE_MEMBERSHIP_TOL: f64 = 1e-8;

/// Multiplier in the membership sampling box bound `M = 10 (1 + |g| + |l|)`.
pub const MEMBERSHIP_BOX_FACTOR: f64 = 10.0;
/// Default RNG seed for membership sampling and study reports.
pub const DEFAULT_SEED: u64 = 0x0b5e55ed;

/// Dichotomy threshold is `max(DICHOTOMY_H_FACTOR * h, DICHOTOMY_FLOOR)`.
pub const DICHOTOMY_H_FACTOR: f64 = 10.0;
pub const DICHOTOMY_FLOOR: f64 = 1e-3;

/// Weights more negative than this fail the monotonicity check.
pub const MONOTONICITY_TOL: f64 = -1e-12;
/// Normal diffusion at a constrained boundary must vanish to this tolerance.
pub const BOUNDARY_DIFFUSION_TOL: f64 = 1e-12;

/// Convergence declaration threshold for study tables: `max(5h, 1e-4)`.
pub const STUDY_DELTA_H_FACTOR: f64 = 5.0;
pub const STUDY_DELTA_FLOOR: f64 = 1e-4;

/// Selection inequality and limit-residual bound: `max(10h, 10*lambda_min)`.
pub const SELECTION_TOL_FACTOR: f64 = 10.0;
/// Consecutive normalized deltas may grow by at most this factor before the
/// study emits a non-monotone warning.
pub const DELTA_MONOTONE_SLACK: f64 = 2.0;
/// Lipschitz quotients growing by more than this factor across the schedule
/// flag a potential equicontinuity failure.
pub const EQUICONTINUITY_GROWTH_FACTOR: f64 = 2.0;
