//! File formats, run configuration and the `acdnet` command-line tool built
//! on [`acdnet_core`].
//!
//! * [`dataset`]: line-delimited JSON dataset and patient files.
//! * [`checkpoint`]: binary model checkpoints and training resume files.
//! * [`config`]: layered run configuration (defaults, TOML file, flags).
//! * [`pipeline`]: split, train, evaluate, ablate, predict.
//! * [`cli`]: argument parsing and the subcommands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;

pub use error::FormatError;
