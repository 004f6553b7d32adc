//! Shared numerical tolerances.
//!
//! Equalities between two exact computations are checked at [`EQUALITY`];
//! inequalities get [`INEQUALITY_SLACK`] to absorb floating-point noise.

/// Two exact routes to the same quantity (chain rule vs. direct KL, forward
/// recursion vs. leaf marginalization).
pub const EQUALITY: f64 = 1e-10;

/// Slack granted to every `lhs <= rhs` check.
pub const INEQUALITY_SLACK: f64 = 1e-12;

/// Row sums and prompt-probability sums.
pub const NORMALIZATION: f64 = 1e-12;

/// Martingale property of per-step advantages.
pub const MARTINGALE: f64 = 1e-12;

/// Direct error vs. performance-difference sum.
pub const PDI_IDENTITY: f64 = 1e-9;

/// Realized KL of a constructed hot context vs. its target.
pub const HOT_KL: f64 = 1e-9;

/// A minorizer at or below this counts as zero. At `theta = roll` the
/// surrogate is `T (J(roll) - b)`, which rounds to about 1e-17 rather than 0.
pub const MINORIZER_POSITIVE: f64 = 1e-10;
