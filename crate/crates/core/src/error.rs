use spmm_chem::propcalc::PropertyError;
use spmm_chem::tokenizer::TokenizerError;
use spmm_chem::SmilesError;
use spmm_nn::CheckpointError;
use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum SpmmError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid SMILES `{smiles}`: {source}")]
    InvalidSmiles { smiles: String, source: SmilesError },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Property(#[from] PropertyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {0} is outside the embedding table")]
    IdOutOfRange(usize),
    #[error("batch of {0} pairs is too small (need at least 2)")]
    BatchTooSmall(usize),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("line {line}: {msg}")]
    LabelParse { line: usize, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

/// Coarse error classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Runtime,
}

impl ErrorCategory {
    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Runtime => "runtime",
        }
    }
}

impl SpmmError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            SpmmError::Config(_) => ErrorCategory::Config,
            SpmmError::InvalidSmiles { .. }
            | SpmmError::Tokenizer(_)
            | SpmmError::Property(_)
            | SpmmError::Checkpoint(_)
            | SpmmError::Io { .. }
            | SpmmError::SequenceTooLong { .. }
            | SpmmError::IdOutOfRange(_)
            | SpmmError::BatchTooSmall(_)
            | SpmmError::EmptySplit(_)
            | SpmmError::LabelParse { .. }
            | SpmmError::Data(_) => ErrorCategory::Data,
            SpmmError::Runtime(_) => ErrorCategory::Runtime,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> SpmmError {
        SpmmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
