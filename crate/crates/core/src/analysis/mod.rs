//! Evaluation harness and numerical checks built on the exact oracle.

pub mod bounds;
pub mod energy;
pub mod eval;

pub use bounds::{
    bound_terms, verify_theorem1, verify_theorem2, Bound, BoundReport, BoundRow, BoundTerms,
};
pub use energy::{energy_distance, permutation_test, PermutationResult};
pub use eval::{
    log_grid, run_eval, EstimatorKind, EstimatorReport, EstimatorSpec, EvalProtocol, ReportRow,
};

/// Formats an f64 for CSV output: shortest round-trip representation.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}
