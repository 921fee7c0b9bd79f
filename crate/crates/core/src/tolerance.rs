//! Numerical tolerances shared by the test suites and the gradient checker.
//!
//! 64-bit constants apply to gradient checks and loop-oracle comparisons;
//! 32-bit constants apply to anything computed in the training precision.

/// Central finite-difference step (64-bit).
pub const FD_STEP: f64 = 1e-5;

/// Maximum relative error between analytic and finite-difference gradients.
pub const GRAD_REL_TOL: f64 = 1e-4;

/// Denominator floor for relative gradient error; below this both values are
/// compared on an absolute scale.
pub const GRAD_MAG_FLOOR: f64 = 1e-8;

/// Convolution / projection vs brute-force loop oracle (64-bit).
pub const ORACLE_TOL: f64 = 1e-9;

/// Scalar loss value vs loop-computed value (64-bit).
pub const LOSS_ORACLE_TOL: f64 = 1e-12;

/// Consistency of a logged total against its weighted parts.
pub const REPORT_TOL: f64 = 1e-9;

/// Probability vectors must sum to one within this bound (32-bit).
pub const PROB_SUM_TOL_F32: f64 = 1e-6;

/// Same bound for the 64-bit path.
pub const PROB_SUM_TOL_F64: f64 = 1e-12;
