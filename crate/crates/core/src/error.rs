use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(
        "sequence exceeds pack capacity: sequence {id} has length {length}, capacity is {capacity}"
    )]
    SequenceExceedsCapacity {
        id: usize,
        length: usize,
        capacity: usize,
    },

    #[error("invalid length: {0}")]
    InvalidLength(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("corrupted position indices: {0}")]
    CorruptedIndices(String),

    #[error("empty plan")]
    EmptyPlan,

    #[error("invalid step size {0}: delta must be non-negative and finite")]
    InvalidStepSize(f64),

    #[error("infeasible length distribution: {0}")]
    InfeasibleDistribution(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("unknown model preset `{0}`")]
    UnknownPreset(String),

    #[error("malformed tensor dump: {0}")]
    MalformedDump(String),

    #[error("json: {0}")]
    Json(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Json(err.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::ShapeMismatch(msg.into()))
}
