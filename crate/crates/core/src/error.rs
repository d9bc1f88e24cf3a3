use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("order {order} exceeds the supported maximum {max}")]
    DegreeTooLarge { order: usize, max: usize },
    #[error("invalid link: {0}")]
    InvalidLink(String),
    #[error("invalid covariate distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("no closed form for this configuration: {0}")]
    NotClosedForm(String),
    #[error("velocity of particle {particle} is not tangent (w·v = {dot:e})")]
    NonTangentVelocity { particle: usize, dot: f64 },
    #[error("degenerate step for particle {particle}")]
    DegenerateStep { particle: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("numerical abort at step {step}: {reason}")]
    NumericalAbort {
        step: usize,
        reason: String,
        dump: Option<PathBuf>,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate teacher set: {0}")]
    DegenerateTeachers(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
}

impl Error {
    /// Process exit status: 2 for configuration problems, 3 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalAbort { .. } => 3,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
