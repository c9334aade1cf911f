//! Experiment harness for the behavioral conditional generative model:
//! configuration, campaign bookkeeping, the three experiment families and
//! SVG plotting. The `cgm-bench` binary is a thin CLI over this library.

pub mod config;
pub mod experiments;
pub mod plot;
pub mod results;
pub mod traj_io;

/// Harness-level errors, separated so the CLI can map them onto exit codes
/// (config problems exit 2, runtime/numerical problems exit 3).
#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl From<cgm_core::Error> for BenchError {
    fn from(e: cgm_core::Error) -> Self {
        BenchError::Runtime(e.to_string())
    }
}
