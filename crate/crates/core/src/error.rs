use thiserror::Error;

/// Errors raised across the library.
///
/// Variants are grouped so that callers (the CLI in particular) can map them
/// onto configuration, data and numerical failure classes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("value {value} outside domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("ill-conditioned system: {0}")]
    Conditioning(String),

    #[error("infeasible alignment: {0}")]
    Infeasible(String),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Broad failure class, used for exit codes and machine-readable reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Parameter(_) => ErrorClass::Config,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::InsufficientData(_)
            | Error::DegenerateData(_)
            | Error::Domain { .. }
            | Error::Infeasible(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorClass::Data,
            Error::Dimension { .. } | Error::Conditioning(_) | Error::Optimizer(_) => {
                ErrorClass::Numerical
            }
            Error::Context { source, .. } => source.class(),
        }
    }

    /// Short stable identifier of the innermost error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::InsufficientData(_) => "insufficient_data",
            Error::DegenerateData(_) => "degenerate_data",
            Error::Domain { .. } => "domain",
            Error::Parameter(_) => "parameter",
            Error::Dimension { .. } => "dimension",
            Error::Conditioning(_) => "conditioning",
            Error::Infeasible(_) => "infeasible",
            Error::Optimizer(_) => "optimizer",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Context { source, .. } => source.kind(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
