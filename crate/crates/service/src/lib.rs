//! HTTP service and command-line front end for the shoeprint engine.
//!
//! - [`api`]: routes for pair jobs, models and population distributions
//! - [`jobs`]: job store, model registry and the bounded worker pool
//! - [`population`]: per-scenario feature distributions (histogram and KDE)
//! - [`cli`]: the `shoeprint` command-line verbs

pub mod api;
pub mod cli;
pub mod error;
pub mod jobs;
pub mod population;

pub use error::{Result, ServiceError};
