use coseg_core::eval::EvalError;
use coseg_core::infer::InferError;
use coseg_core::io::IoError;
use coseg_core::network::ModelError;
use coseg_core::phantom::PhantomError;
use coseg_core::preprocess::PreprocessError;
use coseg_core::train::TrainError;
use serde::Serialize;
use thiserror::Error;

/// Failure classes with distinct process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "malformed_config",
            CliError::Missing(_) => "missing_data",
            CliError::Other(_) => "runtime",
        }
    }

    /// One-line JSON error report for stderr.
    pub fn report(&self) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            error: &'a str,
            message: String,
            exit_code: i32,
        }
        serde_json::to_string(&Report {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        })
        .unwrap_or_else(|_| self.to_string())
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        if e.is_missing() {
            CliError::Missing(e.to_string())
        } else {
            match e {
                IoError::Json { .. } => CliError::Config(e.to_string()),
                _ => CliError::Other(e.to_string()),
            }
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::InvalidPlan(_) | PreprocessError::BoxOutOfRange { .. } => CliError::Config(e.to_string()),
            PreprocessError::MissingModality(_) => CliError::Missing(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::Model(_) => CliError::Config(e.to_string()),
            TrainError::MissingData { .. } => CliError::Missing(e.to_string()),
            TrainError::Io(io) => io.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<InferError> for CliError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::MissingModality { .. } => CliError::Missing(e.to_string()),
            InferError::Model(m) => m.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::MissingMask { .. } => CliError::Missing(e.to_string()),
            EvalError::TooFewPatients { .. } | EvalError::DuplicateId(_) => CliError::Config(e.to_string()),
            EvalError::Train(t) => t.into(),
            EvalError::Infer(i) => i.into(),
            EvalError::Io(io) => io.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}
