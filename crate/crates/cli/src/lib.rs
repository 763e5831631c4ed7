//! Configuration, orchestration and CSV output for the stochastic averaging
//! experiments.

pub mod config;
pub mod emit;
pub mod run;
pub mod table;

pub use config::{Experiment, ExperimentConfig, Setup};
pub use emit::{emit_tables, MANIFEST};
pub use run::{random_trig, run, ResultBundle, VERSION};
pub use table::{fmt_f64, Table};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] stochavg_core::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("i/o on {0}: {1}")]
    Io(String, String),
}

impl HarnessError {
    /// Machine-readable class for error reports.
    pub fn class(&self) -> &'static str {
        match self {
            HarnessError::Core(e) => e.class(),
            HarnessError::Config(_) => "config",
            HarnessError::Io(..) => "io",
        }
    }
}
