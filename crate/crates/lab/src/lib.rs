//! File formats, checkpoint container, run directories and the experiment
//! stages behind the `seqrec` command.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod rundir;

pub use config::{ExperimentConfig, LoadedConfig};
pub use error::{LabError, Result};
pub use pipeline::Session;
pub use rundir::WriteMode;
