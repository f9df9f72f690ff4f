//! Numerical-fragility diagnostics for low-precision transformer blocks.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod diagnostics;
pub mod driver;
pub mod earlywarning;
pub mod linalg;
pub mod mitigation;
pub mod model;
pub mod precision;
pub mod stats;
