//! Configuration-driven scenario runner for `elapsed-core`.
//!
//! A scenario is a TOML file describing one model, its initial data and an
//! ordered list of tasks; see `docs/config.md` for the keys.

pub mod config;
pub mod runner;

pub use config::{RunError, Scenario, Task};
pub use runner::{run, validate, RunReport};
