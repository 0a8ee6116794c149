//! Monte Carlo studies of the estimators.

mod dgp;
mod study;

pub use dgp::*;
pub use study::*;
