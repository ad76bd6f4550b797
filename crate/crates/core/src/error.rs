use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("prototype bank is frozen")]
    FrozenBank,

    #[error("prototype bank has no styles")]
    EmptyBank,

    #[error("inconsistent state: {0}")]
    Consistency(String),

    #[error("noise schedule is singular at t={0} (alpha_bar = 0)")]
    Singular(usize),

    #[error("timestep {t} out of range 0..={max}")]
    Timestep { t: usize, max: usize },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("oracle classifier failed its gate: eval accuracy {accuracy:.4} < {required:.2}")]
    UngatedOracle { accuracy: f64, required: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format { what, reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
