use thiserror::Error;

/// Everything that can go wrong in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid trace mode `{0}`")]
    TraceMode(String),

    #[error("invalid value for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("unknown system `{0}` (valid: gbm, double_pendulum, bicycle, fhn, three_link)")]
    UnknownSystem(String),

    #[error("mass matrix is not positive definite at state {state:?}")]
    SingularMatrix { state: Vec<f64> },

    #[error("class-K function evaluated at negative argument {0}")]
    NegativeArgument(f64),

    #[error("barrier is not maximal at the origin: sampled value {sampled} exceeds h(0) = {origin}")]
    BarrierNotMaximal { origin: f64, sampled: f64 },

    #[error("non-finite loss at iteration {iteration}, first offending point {point:?}")]
    NonFiniteLoss { iteration: usize, point: Vec<f64> },

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("loss evaluation failed: {context}: {source}")]
    Loss {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
