//! Error taxonomy shared across the crate.
//!
//! Variants map one-to-one onto the CLI exit codes: config (2), numeric
//! fault (3), integrity (4), shape (5), budget (6), gradcheck (7).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("numeric fault in {op}: non-finite value at flat index {index}")]
    NumericFault { op: &'static str, index: usize },

    #[error("numeric fault during training at step {step}")]
    TrainingFault { step: u64 },

    #[error("out of range in {op}: {detail}")]
    OutOfRange { op: &'static str, detail: String },

    #[error("no projector registered for layer {layer}")]
    UnknownLayer { layer: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },

    #[error("answer head mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("unknown adapter target `{0}`")]
    UnknownTarget(String),

    #[error("adapter rank {r} exceeds min(d_in, d_out) = {limit}")]
    RankTooLarge { r: usize, limit: usize },

    #[error("mixture has no datasets")]
    EmptyMixture,

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("budget error: {0}")]
    Budget(String),

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error per the fixed CLI taxonomy.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NumericFault { .. } | Error::TrainingFault { .. } => 3,
            Error::Integrity(_) => 4,
            Error::ShapeMismatch { .. } => 5,
            Error::Budget(_) => 6,
            _ => 1,
        }
    }
}
