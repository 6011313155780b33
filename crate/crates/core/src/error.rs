//! Error taxonomy shared by the whole pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad arguments to an operator evaluation (point outside the domain,
    /// dimension mismatch, nonpositive rescaling parameter, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A stencil weight came out negative, so the scheme is not monotone.
    #[error("monotonicity violated at node {node}, control {control}: weight {weight:.6e} toward neighbor {neighbor}")]
    Monotonicity {
        node: usize,
        control: usize,
        neighbor: usize,
        weight: f64,
    },

    /// Scheme assembly failed for a structural reason (grid too coarse,
    /// boundary stencil impossible, non-oblique boundary direction, ...).
    #[error("scheme build error: {0}")]
    Build(String),

    /// An iterative solver ran out of its sweep budget.
    #[error("solver did not converge: residual {residual:.6e} after {iterations} iterations (tolerance {tolerance:.1e})")]
    Convergence {
        residual: f64,
        iterations: usize,
        tolerance: f64,
    },

    /// A policy-evaluation or boundary linear system could not be factored.
    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("LP infeasible: {0}")]
    LpInfeasible(String),

    #[error("LP unbounded: {0}")]
    LpUnbounded(String),

    /// The simplex terminated but its solution failed the residual checks.
    #[error("LP numerical failure: {0}")]
    LpNumerics(String),

    /// A problem description failed validation.
    #[error("invalid problem spec: {0}")]
    Validation(String),

    /// The sampled control set has no member expensive enough for a
    /// requested mean-cost shift.
    #[error("coercivity error: {0}")]
    Coercivity(String),

    /// Independent critical-value routes disagree beyond tolerance.
    #[error("route disagreement: {0}")]
    RouteDisagreement(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
