//! CLI error type with stable exit codes.
//!
//! | code | meaning |
//! |------|---------|
//! | 2 | configuration error (bad flag, bad or missing config key) |
//! | 3 | I/O error (unreadable input, unwritable output) |
//! | 4 | training aborted on a non-finite loss or gradient |
//! | 5 | run id collision (output already exists; nothing overwritten) |
//! | 6 | checkpoint does not match the model configuration |

use hmil_core::eval::EvalError;
use hmil_core::model::ModelError;
use hmil_core::sampling::SamplingError;
use hmil_core::synthwsi::SynthError;
use hmil_core::tensor::checkpoint::CheckpointError;
use hmil_core::train::TrainError;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("I/O: {0}")]
    Io(String),
    #[error("training aborted: {0}")]
    Nan(String),
    #[error("collision: {0} already exists; refusing to overwrite")]
    Collision(String),
    #[error("checkpoint/config mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Nan(_) => 4,
            CliError::Collision(_) => 5,
            CliError::Mismatch(_) => 6,
        }
    }

    pub fn io(op: &str, path: &Path, err: std::io::Error) -> CliError {
        CliError::Io(format!("{op} {}: {err}", path.display()))
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> CliError {
        match e {
            SynthError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<SamplingError> for CliError {
    fn from(e: SamplingError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> CliError {
        match e {
            EvalError::Io { .. } => CliError::Io(e.to_string()),
            EvalError::Synth(inner) => CliError::from(inner),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            // Any error raised inside a training step means the run diverged;
            // the step context carries the epoch and batch position.
            TrainError::Step { .. } | TrainError::NonFiniteLoss { .. } => {
                CliError::Nan(e.to_string())
            }
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            TrainError::Eval(inner) => CliError::from(inner),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> CliError {
        // A checkpoint that cannot be decoded is an unusable input file, not
        // a shape mismatch, so it maps to the I/O code.
        CliError::Io(format!("checkpoint: {e}"))
    }
}
