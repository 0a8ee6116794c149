//! Federated doubly robust estimation of the target average treatment effect.

pub mod domain;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod nuisance;
pub mod tilt;

pub use error::{Error, Result};
pub mod ensemble;
pub mod site;
pub mod pipeline;
pub mod pooled;
pub mod federation;
pub mod simulation;
