use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("non-finite {what} at row {row}")]
    NumericRow { what: &'static str, row: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid spline: {0}")]
    InvalidSpline(String),

    #[error("cannot compose bijectors: {0}")]
    Composition(String),

    #[error("column `{0}` is constant; declare it as discrete")]
    DegenerateColumn(String),

    #[error("value {0} is not a level of the empirical CDF")]
    UnknownLevel(f64),

    #[error("value outside the open unit interval: {0}")]
    Domain(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingFailure { epoch: usize, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unsupported margin variant: {0}")]
    UnsupportedVariant(String),

    #[error("degenerate treatment: {0}")]
    DegenerateTreatment(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid benchmark spec: {0}")]
    Spec(String),

    #[error("design matrix is singular")]
    SingularDesign,

    #[error("no convergence after {0} iterations")]
    Convergence(usize),

    #[error("complete separation detected")]
    Separation,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("corrupt model file: {0}")]
    Corrupt(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::InvalidParameter(_)
                | Error::InvalidSpline(_)
                | Error::Composition(_)
                | Error::DegenerateColumn(_)
                | Error::UnknownLevel(_)
                | Error::Domain(_)
                | Error::InsufficientData(_)
                | Error::UnsupportedVariant(_)
                | Error::DegenerateTreatment(_)
                | Error::Degenerate(_)
                | Error::Schema(_)
                | Error::Spec(_)
                | Error::Parse { .. }
                | Error::Version { .. }
                | Error::Corrupt(_)
                | Error::Usage(_)
        )
    }
}
