//! Experiment harness: configuration, grid sweeps, the utility-quality probe
//! and CSV artifacts.

pub mod config;
pub mod output;
pub mod presets;
pub mod probe;
pub mod runner;

pub use config::{load, resolve, ConfigError, ExperimentConfig, Overrides, ProbeKind};
pub use probe::{run_quality_probe, ProbeRun, ProbeSummary};
pub use runner::{run_experiment, summarize, train, RunOutcome, RunStatus, SweepSummary};

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Mnist(#[from] crate::tasks::MnistError),
    #[error(transparent)]
    Task(#[from] crate::tasks::TaskError),
    #[error(transparent)]
    Network(#[from] crate::nn::NnError),
    #[error(transparent)]
    Utility(#[from] crate::utility::UtilityError),
    #[error(transparent)]
    Optim(#[from] crate::optim::OptimError),
    #[error("MNIST directory not configured")]
    MissingMnist,
    #[error("cannot start worker pool: {0}")]
    Pool(String),
    #[error("{0}")]
    Summary(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Errors a user fixes by editing the configuration.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_) | HarnessError::Optim(crate::optim::OptimError::InvalidConfig(_))
        )
    }
}
