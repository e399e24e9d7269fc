//! Batch front-end: dataset generation, training, evaluation and experiment
//! sweeps, each reading and writing plain files under one output directory.

pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_gen_dataset, cmd_run, cmd_train, Artifacts, ModelCard, Which, METRICS_HEADER};
pub use config::{DataConfig, EvalConfig, Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] ccmlab::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Run(ccmlab::Error::Config(_)) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Run(e.into())
    }
}
