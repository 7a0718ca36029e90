use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the engine.
///
/// Every variant carries enough context to be reported as a machine-readable
/// record by the command-line tool (see [`Error::kind`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: required column `{column}` not found")]
    Schema { column: String },

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("covariate `{0}` has zero variance and cannot be standardized")]
    DegenerateCovariate(String),

    #[error("invalid specification: {0}")]
    Spec(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("REML optimisation did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    Convergence {
        iterations: usize,
        gradient_norm: f64,
        trace: Vec<f64>,
    },

    #[error("model is not identifiable: {0}")]
    Identifiability(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    /// Short stable identifier for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema { .. } => "schema",
            Error::Parse { .. } => "parse",
            Error::Consistency(_) => "consistency",
            Error::DegenerateCovariate(_) => "degenerate_covariate",
            Error::Spec(_) => "spec",
            Error::Rank(_) => "rank",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::Numerical(_) => "numerical",
            Error::Convergence { .. } => "convergence",
            Error::Identifiability(_) => "identifiability",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Serialization(_) => "serialization",
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
