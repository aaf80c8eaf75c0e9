use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("covariance matrix is not positive definite: {0}")]
    DegenerateCovariance(String),

    #[error("stacked fixed-effect design has rank {rank}, need {required}")]
    RankDeficientDesign { rank: usize, required: usize },

    #[error("objective returned a non-finite value: {0}")]
    NonFiniteObjective(String),

    #[error("inner mode search did not converge after {iterations} iterations")]
    InnerModeDivergence { iterations: usize },

    #[error("exact outcome enumeration needs m <= {max}, got m = {m}")]
    EnumerationTooLarge { m: usize, max: usize },

    #[error("{failures} of {attempted} fits failed for {estimator} at n = {n}")]
    ExperimentDegenerate {
        estimator: String,
        n: usize,
        failures: usize,
        attempted: usize,
    },

    #[error("need at least {required} usable grid points, got {usable}")]
    InsufficientGrid { usable: usize, required: usize },

    #[error("Monte-Carlo estimate needs at least one draw")]
    InsufficientDraws,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Stable machine-readable class name, used by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::DegenerateCovariance(_) => "DegenerateCovariance",
            Error::RankDeficientDesign { .. } => "RankDeficientDesign",
            Error::NonFiniteObjective(_) => "NonFiniteObjective",
            Error::InnerModeDivergence { .. } => "InnerModeDivergence",
            Error::EnumerationTooLarge { .. } => "EnumerationTooLarge",
            Error::ExperimentDegenerate { .. } => "ExperimentDegenerate",
            Error::InsufficientGrid { .. } => "InsufficientGrid",
            Error::InsufficientDraws => "InsufficientDraws",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::UnsupportedDimension(_) => "UnsupportedDimension",
            Error::InvalidInput(_) => "InvalidInput",
            Error::Format { .. } => "FormatError",
            Error::Io(_) => "IoError",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
