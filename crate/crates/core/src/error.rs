use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("gradient requested for non-scalar output of shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("{heads} heads cannot be split into {groups} equal direction groups")]
    HeadsNotDivisible { heads: usize, groups: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("unknown reward `{0}`")]
    UnknownReward(String),

    #[error("{what} = {value} is out of range ({expected})")]
    OutOfRange {
        what: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite state at step {step}")]
    Diverged { step: usize },

    #[error("line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::NotScalar { .. } => "not_scalar",
            Error::HeadsNotDivisible { .. } => "heads_not_divisible",
            Error::UnknownParam(_) => "unknown_param",
            Error::UnknownReward(_) => "unknown_reward",
            Error::OutOfRange { .. } => "out_of_range",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Diverged { .. } => "diverged",
            Error::Manifest { .. } => "manifest",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
