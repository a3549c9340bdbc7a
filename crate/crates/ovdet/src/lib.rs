//! Files, configuration and experiment drivers around `ovdet-core`.
//!
//! The `ovdet` binary is a thin front end over these modules; the
//! acceptance suite drives them directly.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod reports;

pub use error::{CliError, Result};
