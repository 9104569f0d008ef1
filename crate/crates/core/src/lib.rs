//! Numerical toolkit for the elapsed-time (age-structured) neuron model
//! with instantaneous, discrete-delay and distributed-delay interaction.

pub mod analysis;
pub mod error;
pub mod model;
pub mod quad;
pub mod simulate;
pub mod steady;
pub mod trials;
pub mod volterra;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
