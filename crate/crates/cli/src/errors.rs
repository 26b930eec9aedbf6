//! Process-level error classification.
//!
//! Every failure collapses to one of four exit classes so scripts can branch
//! on the code alone: 2 for configuration mistakes, 3 for solver/generation
//! failures, 4 for a training abort (non-finite loss), 5 for I/O trouble.

use std::fmt;

use prose_fd::datagen::GenError;
use prose_fd::train::TrainError;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config keys/values, incompatible shapes. Exit 2.
    Config(String),
    /// The physics generator could not produce the requested data. Exit 3.
    Generation(String),
    /// Training hit a non-finite loss and stopped. Exit 4.
    TrainingAbort(String),
    /// Missing/corrupt files or failed writes. Exit 5.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Generation(_) => 3,
            CliError::TrainingAbort(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Generation(m) => write!(f, "generation failed: {m}"),
            CliError::TrainingAbort(m) => write!(f, "training aborted: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::Config(_) | GenError::Patch(_) | GenError::Symbolic(_) => {
                CliError::Config(e.to_string())
            }
            GenError::Instability(_) | GenError::BudgetExhausted { .. } => {
                CliError::Generation(e.to_string())
            }
            GenError::BadFile(_) | GenError::Io(_) | GenError::Json(_) => {
                CliError::Io(e.to_string())
            }
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::TrainingAbort(e.to_string()),
            TrainError::Config(_)
            | TrainError::EmptySplit(_)
            | TrainError::Tensor(_)
            | TrainError::Model(_)
            | TrainError::Patch(_) => CliError::Config(e.to_string()),
            TrainError::Gen(g) => g.into(),
            TrainError::Store(_) | TrainError::Io(_) | TrainError::Json(_) => {
                CliError::Io(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
