//! Command-line front end for the cadence recommender: configuration
//! layering, run manifests and the train / rerank / eval / verify-norm /
//! sweep commands.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
