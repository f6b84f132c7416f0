//! Raw numeric kernels over flat slices.
//!
//! The tape ops in [`crate::tape`] wrap these for shape checking and
//! gradient bookkeeping; keeping the arithmetic here lets forward-only
//! consumers (finite-difference checks, benchmarks) reuse the exact same
//! code paths.

pub mod attention;
pub mod conv;
pub mod loss;
pub mod matmul;
pub mod pool;
pub mod softmax;
