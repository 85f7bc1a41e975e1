use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MocError {
    #[error("token stream is empty")]
    EmptyStream,

    #[error("non-monotonic stream at token {index}: {what}")]
    NonMonotonicStream { index: usize, what: &'static str },

    #[error("invalid token metadata at token {index}: {reason}")]
    InvalidMeta { index: usize, reason: String },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),

    #[error("drop perturbation requested while drop is disabled")]
    DropDisabled,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid scene spec: {0}")]
    SpecInvalid(String),

    #[error("unknown schedule preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("no {kind} registered under `{name}`")]
    UnknownStrategy { kind: &'static str, name: String },
}

pub type Result<T> = std::result::Result<T, MocError>;
