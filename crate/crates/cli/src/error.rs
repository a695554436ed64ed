use std::fmt;

use fatigue_core::artifact::ArtifactError;
use fatigue_core::data::DataError;
use fatigue_core::harness::HarnessError;
use fatigue_core::ModelError;

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    /// Prefixes the message with a stage name.
    pub fn in_stage(self, stage: &str) -> CliError {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("stage '{stage}': {m}")),
            CliError::Data(m) => CliError::Data(format!("stage '{stage}': {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("stage '{stage}': {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Usage(m),
            ModelError::Data(d) => CliError::Data(d.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(m) => CliError::Usage(m),
            HarnessError::Data(d) => CliError::Data(d.to_string()),
            HarnessError::Model(m) => m.into(),
        }
    }
}

impl From<ArtifactError> for CliError {
    fn from(e: ArtifactError) -> Self {
        CliError::Data(e.to_string())
    }
}
