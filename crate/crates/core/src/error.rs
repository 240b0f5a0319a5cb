use thiserror::Error;

/// Errors raised by models, trainers and oracles.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {what} = {value} is outside the valid domain")]
    Domain { what: String, value: f64 },

    #[error("domain error at sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("empty dataset")]
    EmptyData,

    #[error("zero-variance input in column `{column}`")]
    ZeroVariance { column: String },

    #[error("category `{0}` is not part of the declared support")]
    UnknownCategory(String),

    #[error("unseen condition `{0}`")]
    UnseenCondition(String),

    #[error("derivative {value:e} underflowed the 1e-300 floor")]
    Underflow { value: f64 },

    #[error("step-size error: factor 1 + b'dt = {factor} <= 0 at node {node}, t = {time}")]
    StepSize { node: usize, time: f64, factor: f64 },

    #[error("stiffness error: node {node} exhausted the step budget at t = {time} after {halvings} halvings")]
    Stiffness {
        node: usize,
        time: f64,
        halvings: u32,
    },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("column `{column}` has the wrong type: expected {expected}")]
    ColumnType { column: String, expected: String },

    #[error("csv error at line {line}, column `{column}`: {message}")]
    Csv {
        line: usize,
        column: String,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("json error: {0}")]
    Json(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn at_sample(self, index: usize) -> Self {
        Error::Sample {
            index,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad input (as opposed to numerical failure).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::EmptyData
                | Error::ZeroVariance { .. }
                | Error::UnknownCategory(_)
                | Error::UnseenCondition(_)
                | Error::MissingColumn(_)
                | Error::ColumnType { .. }
                | Error::Csv { .. }
                | Error::InvalidArgument(_)
                | Error::Shape { .. }
                | Error::Json(_)
                | Error::Io(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
