use thiserror::Error;

use crate::data::ClassId;

/// Failures while reading IDX files.
#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad image magic {0:#010x}")]
    BadImageMagic(u32),
    #[error("bad label magic {0:#010x}")]
    BadLabelMagic(u32),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("label {0} out of range 0..=9")]
    LabelOutOfRange(u8),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported primitive in backward: {0}")]
    UnsupportedPrimitive(&'static str),
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("non-finite value detected in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("no prototype for class {0}")]
    MissingPrototype(ClassId),
    #[error("class {0} already has a prototype")]
    DuplicateClass(ClassId),
    #[error("no class mixtures available for prediction")]
    NoMixtures,
    #[error("sinkhorn did not converge in {iters} iterations (marginal residual {residual:e})")]
    SinkhornNotConverged { iters: usize, residual: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidLearningRate(_) => 1,
            Error::Idx(_) | Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) => 2,
            Error::NonFinite(_) => 3,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
