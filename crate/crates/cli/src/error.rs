//! CLI error taxonomy mapped onto process exit codes.

use std::path::PathBuf;

use pr2l_core::learners::LearnError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing artifact {path}: run `pr2l {producer}` first")]
    MissingArtifact {
        path: PathBuf,
        producer: &'static str,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            LearnError::BadConfig(_) => CliError::Config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(format!("serialization error: {e}"))
    }
}

macro_rules! impl_other {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Other(e.to_string())
            }
        }
    )*};
}

impl_other!(
    pr2l_core::gridcraft::GridError,
    pr2l_core::navhome::NavError,
    pr2l_core::repr::ReprError,
    pr2l_core::vlm::VlmError,
    pr2l_core::policy::PolicyError,
    pr2l_core::tensor::TensorError,
    pr2l_core::tensor::checkpoint::CheckpointError,
    pr2l_core::evalkit::EvalError,
    pr2l_core::repr::pca::PcaError
);
