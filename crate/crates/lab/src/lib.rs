//! File formats, run configuration, reporting and the `igdm` command line
//! for `igdm-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod idx;
pub mod metrics;
pub mod report;

pub use cli::{run_command, WallClock};
pub use error::{LabError, Result};
