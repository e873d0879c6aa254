use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A problem-file field is missing, malformed or has the wrong shape.
    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("assumption violated: {0}")]
    Assumption(String),

    /// The floor starts above the initial state, so no control is admissible.
    #[error("infeasible initial condition: L(0) = {floor} exceeds x = {x}")]
    Infeasible { floor: f64, x: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Field {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
