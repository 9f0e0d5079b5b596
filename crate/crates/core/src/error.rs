use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate signal: cannot power-normalize an all-zero vector")]
    DegenerateSignal,

    #[error("invalid channel spec: {0}")]
    InvalidChannel(String),

    #[error("fading channels pair real symbols into complex ones; got odd length {0}")]
    OddSymbolCount(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {n_label} classes")]
    LabelOutOfRange { label: usize, n_label: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("unknown user index {index} (model has {n_users} users)")]
    UnknownUser { index: usize, n_users: usize },

    #[error("failed to ingest {}: {message}", file.display())]
    Ingestion { file: PathBuf, message: String },

    #[error("checkpoint integrity error: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match the requested run:\n{}", .0.join("\n"))]
    ConfigMismatch(Vec<String>),

    #[error("loss became non-finite at epoch {epoch}, step {step} (SNRs {snrs:?} dB): {breakdown}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        snrs: Vec<f64>,
        breakdown: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }
}
