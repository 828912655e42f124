//! Experiment driver for the pipelined SGD engine: configuration, runs,
//! calibration, timing predictions and charts.

pub mod calibrate;
pub mod charts;
pub mod compare;
pub mod config;
pub mod experiment;
pub mod keepalive;
pub mod predict;

use pipesgd_core::engine::EngineError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("threshold violated: {0}")]
    Threshold(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(EngineError),
}

impl HarnessError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Transport(_) => 3,
            HarnessError::Threshold(_) => 4,
            HarnessError::Io(_) | HarnessError::Engine(_) => 1,
        }
    }
}

impl From<EngineError> for HarnessError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(msg) => HarnessError::Config(msg),
            EngineError::Collective(c) => HarnessError::Transport(c.to_string()),
            other => HarnessError::Engine(other),
        }
    }
}

impl From<pipesgd_core::collective::CollectiveError> for HarnessError {
    fn from(e: pipesgd_core::collective::CollectiveError) -> Self {
        HarnessError::Transport(e.to_string())
    }
}
