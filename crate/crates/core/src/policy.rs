//! Numeric tolerances shared by every module.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericPolicy {
    /// Exact-arithmetic checks (stationarity, row sums, idempotency).
    pub algebra_tol: f64,
    /// Results of linear solves composed a few times.
    pub solve_tol: f64,
    /// Iterative or finite-difference estimates.
    pub iterative_tol: f64,
    /// Entries of `u` at or below this are treated as zero in support analysis.
    pub support_tol: f64,
    /// Accepted `|n (g(n)/m - 1) - b|` at the last entry of a tabulated jump rate.
    pub table_tail_tol: f64,
}

impl Default for NumericPolicy {
    fn default() -> Self {
        Self {
            algebra_tol: 1e-12,
            solve_tol: 1e-10,
            iterative_tol: 1e-8,
            support_tol: 1e-12,
            table_tail_tol: 0.1,
        }
    }
}
