//! Monotone finite-difference solvers and occupation-measure linear programs
//! for discounted Hamilton-Jacobi-Bellman boundary-value problems.
//!
//! The library is organized as a pipeline:
//!
//! * [`problem`] — continuous problem descriptions: Bellman operators of the
//!   form `F(x, p, X) = sup_a { -tr(a X) - b.p - L }`, control sets, boundary
//!   conditions, and a small catalog of closed-form benchmark problems.
//! * [`discretize`] — monotone upwind schemes on interval/rectangle grids,
//!   monotonicity and consistency diagnostics.
//! * [`discount`] — discounted solves: damped value iteration and policy
//!   iteration with banded policy evaluation.
//! * [`measures`] — the bundled simplex (in [`lp`]) applied to the discrete
//!   occupation-measure programs: Green measures (discounted duality), Mather
//!   measures (ergodic duality), dual-cone membership, and mass-shift surgery.
//! * [`ergodic`] — the critical value by three routes (vanishing discount,
//!   subsolution LP, measure LP) and normalized correctors.
//! * [`study`] — end-to-end vanishing-discount studies with on-disk artifacts.

pub mod constants;
pub mod discount;
pub mod discretize;
pub mod ergodic;
pub mod error;
pub mod lp;
pub mod measures;
pub mod problem;
pub mod study;

mod banded;

pub use discount::{bellman_residual, policy_iteration, value_iteration, Policy, ValueFunction};
pub use discretize::{build_scheme, check_monotonicity, consistency_probe, DiscreteOperator, Grid};
pub use ergodic::{
    corrector, critical_value_measure_lp, critical_value_subsolution_lp,
    critical_value_vanishing_discount, dichotomy_threshold, ergodic_residual, Dichotomy,
    ErgodicResult, LambdaRow, Route,
};
pub use error::{Error, Result};
pub use measures::{
    dual_cone_membership, duality_gap, green_measure, mass_shift, mather_measure,
    neumann_boundary_mass_bound, stationarity_residual, GapReport, LpSolution, MeasurePair,
    MembershipReport,
};
pub use problem::{
    bellman_f, catalog, constant_cost, eikonal_1d, f_phi, validate_spec, viscous_quadratic_1d,
    BcKind, BoundaryCondition, Coefficients, ControlSet, Domain, ProblemSpec, SymMat,
};
pub use study::{
    equicontinuity_probe, run_study, ConvergenceTable, ModulusReport, RouteSummary,
    SelectionReport, StudyConfig, StudyReport, TableRow,
};
