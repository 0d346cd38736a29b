use std::fmt;

use salseg_core::dataset::DatasetError;
use salseg_core::metrics::CsvError;
use salseg_core::pipeline::PipelineError;
use salseg_core::trainer::TrainError;

/// Process exit status classes.
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// A command failure: either bad input (exit 1) or an abort while running
/// (exit 2).
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "aborted: {m}"),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::runtime(e.to_string()),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } | TrainError::Checkpoint { .. } => CliError::runtime(e.to_string()),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Dataset(d) => d.into(),
            PipelineError::Train(t) => t.into(),
            other => CliError::validation(other.to_string()),
        }
    }
}

impl From<CsvError> for CliError {
    fn from(e: CsvError) -> Self {
        match e {
            CsvError::Format { .. } => CliError::validation(e.to_string()),
            CsvError::Csv { .. } => CliError::runtime(e.to_string()),
        }
    }
}

pub fn io_error(context: impl fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::runtime(format!("{context}: {e}"))
}

pub type CliResult<T> = Result<T, CliError>;
