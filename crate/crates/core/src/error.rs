use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    /// A ratio whose denominator vanished (zero union, zero enclosing area, ...).
    #[error("undefined: {0}")]
    Undefined(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("value {value} outside range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("teacher and student bin grids differ")]
    GridMismatch,

    #[error("not a probability vector: {0}")]
    NotSimplex(String),

    #[error("unknown scheme `{name}` (valid schemes: {valid})")]
    UnknownScheme { name: String, valid: String },

    #[error("scheme `{0}` requires a teacher model")]
    MissingTeacher(String),

    #[error("singular configuration: {0}")]
    Singular(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            reason: reason.into(),
        }
    }
}
