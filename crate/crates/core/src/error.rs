use thiserror::Error;

/// Errors raised by the tensor engine, models, trainers and data generator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceLength { len: usize, max_len: usize },

    #[error("non-finite gradient for parameter `{param}`; training aborted")]
    NanGradient { param: String },

    #[error("training aborted at step {step}: {detail}")]
    TrainingAbort { step: usize, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("CTC infeasible: {frames} frames cannot align {required} required positions")]
    Infeasible { frames: usize, required: usize },

    #[error("unknown domain preset `{0}`")]
    UnknownPreset(String),

    #[error("I/O error at {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
