use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CpvError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("infeasible environment request: {required} required objects but only {free} free cells")]
    Infeasible { required: usize, free: usize },

    #[error("planner gave up after {attempts} attempts")]
    RetriesExhausted { attempts: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch needs at least two distinct pairs for triplet losses")]
    NoNegative,

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CpvError>;
