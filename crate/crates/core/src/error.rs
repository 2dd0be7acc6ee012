use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("cannot normalize a zero vector (degenerate input)")]
    DegenerateNormalization,

    #[error("gradient tape was already consumed by a backward pass")]
    TapeConsumed,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid session: {0}")]
    InvalidSession(String),

    #[error("no valid sample positions: {0}")]
    EmptyRange(String),

    #[error("index {index} out of range for {len} valid positions")]
    OutOfRange { index: usize, len: usize },

    #[error("class {class} has no other member to pair with")]
    SingletonClass { class: u32 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged (non-finite loss) at step {step}")]
    Divergence { step: usize },

    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.into(),
        got: got.into(),
    }
}
