//! File formats, run configuration and the `gcsa` command line on top of
//! `gcsa-core`.
//!
//! | module | contents |
//! |---|---|
//! | [`config`] | `RunConfig`, the JSON run configuration and its hash |
//! | [`format`] | dataset directories, checkpoints, rankings and metrics files |
//! | [`pipeline`] | generation, training and re-ranking steps |
//! | [`cli`] | subcommands and exit codes |

pub mod cli;
pub mod config;
pub mod error;
pub mod format;
pub mod pipeline;

pub use crate::config::RunConfig;
pub use crate::error::{CliError, Result};
