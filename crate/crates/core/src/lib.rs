//! Linear–quadratic stochastic control under an expected path constraint
//! `E[X_t] ≥ L_t`.
//!
//! The solver decouples the optimality system with a Riccati field, solves
//! the remaining deterministic mean problem by penalization with
//! continuation in the penalty weight, and recovers the compensator
//! measure `μ` and the optimal value. Monte Carlo simulation and a
//! binomial-tree optimizer provide independent checks.

pub mod error;
pub mod grid;
pub mod measure;
pub mod montecarlo;
pub mod obstacle;
pub mod oracle;
pub mod problem;
pub mod riccati;

pub use error::{Error, Result};
pub use grid::{GridFunction, ScalarPath, TimeGrid};
pub use measure::{complementarity_residual, distance_to_cone, ComplementarityReport, Compensator};
pub use montecarlo::{
    parallelogram_check, simulate, simulate_functional, verification_fuzz, FeedbackPolicy, FuzzOptions, FuzzReport,
    MCConfig, MCResult, ParallelogramReport,
};
pub use obstacle::{
    cost_via_moments, optimal_value, penalized_cost, penalized_value, solve_constrained, solve_penalized,
    MeanSolution, PenalizedSolution, PenaltySchedule, PenaltyTrace, StageRecord, Tolerances,
};
pub use oracle::{
    tree_central_difference, tree_floor_term, tree_gradient, tree_minimize, tree_multistart, tree_objective, tree_objective_terms, TreeOptions, TreeProblem,
    TreeSolution,
};
pub use problem::{validate_spec, ProblemFile, ProblemSpec, ScalarProblem, ValidationReport};
pub use riccati::{gain_at, solve_riccati, RiccatiSolution};
