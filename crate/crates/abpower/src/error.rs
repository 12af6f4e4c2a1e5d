//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Too few observations to carry the computation out.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Skewness is undefined because the sample variance is zero.
    #[error("skewness undefined: sample variance is zero")]
    UndefinedSkewness,

    /// A design-matrix column is (numerically) linearly dependent on the
    /// columns before it. Column 0 is the intercept, column j >= 1 is the
    /// j-th covariate.
    #[error("collinear design: column {column} is linearly dependent on earlier columns")]
    Collinear { column: usize },

    /// A ratio denominator mean was zero or negative.
    #[error("degenerate denominator: {0}")]
    DegenerateDenominator(String),

    /// One unit carried two different arm labels.
    #[error("inconsistent assignment: unit {unit} carries arm labels {first:?} and {second:?}")]
    InconsistentAssignment {
        unit: String,
        first: String,
        second: String,
    },

    /// Input rows disagree on structure (covariate arity, missing columns, ...).
    #[error("schema error: {0}")]
    Schema(String),

    /// A single input row could not be used; `line` is the 1-based file line.
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },

    /// Two arm estimates cannot be combined.
    #[error("incompatible arms: {0}")]
    IncompatibleArms(String),

    /// The experiment layout of the data is unusable (e.g. not exactly two arms).
    #[error("design error: {0}")]
    Design(String),

    /// Invalid configuration (flags, config-file fields, solver targets).
    #[error("config error: {0}")]
    Config(String),

    /// The data as a whole is unusable (empty input, unusable values).
    #[error("data error: {0}")]
    Data(String),

    /// The simulation harness itself failed (e.g. too many estimator failures).
    #[error("harness error: {0}")]
    Harness(String),

    /// A simulation calibration band was violated.
    #[error("calibration band violated: {0}")]
    CalibrationBand(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config/schema, 3 data, 4 calibration band.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) => 2,
            Error::CalibrationBand(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
