use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed csv: {0}")]
    Csv(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric cell {value:?} at row {row}, column `{column}`")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("column `{column}` must be 0/1 but row {row} holds {value}")]
    InvalidBinary {
        column: String,
        row: usize,
        value: f64,
    },
    #[error("time column `{column}` must hold positive integers but row {row} holds {value}")]
    InvalidTime {
        column: String,
        row: usize,
        value: f64,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid fold count {folds} for {n} rows (need 2 <= J <= n)")]
    InvalidFoldCount { n: usize, folds: usize },

    #[error("observation has no covariate `{0}`")]
    MissingCovariate(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("unsupported sieve family: {0}")]
    UnsupportedFamily(String),

    #[error("loss requires nuisance `{0}`")]
    MissingNuisance(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("beta-geometric parameters out of range: a={a}, b={b} (|.| must be <= 30)")]
    NumericRange { a: f64, b: f64 },
    #[error("functional has no pointwise derivative representation")]
    NonPointwiseFunctional,

    #[error("linear system is singular after jitter retry")]
    SingularSystem,
    #[error("Newton failed to converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NewtonDivergence { iterations: usize, grad_norm: f64 },
    #[error("no candidate sieve dimension could be fitted")]
    NoEligibleDimension,

    #[error("fluctuation score has no root in [-10, 10]")]
    NoBracket,
    #[error("degenerate quantity: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("fold {fold}: {source}")]
    InFold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_fold(self, fold: usize) -> Self {
        match self {
            e @ Error::InFold { .. } => e,
            other => Error::InFold {
                fold,
                source: Box::new(other),
            },
        }
    }

    /// Strips fold tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::InFold { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors that come from reading or validating input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self.root(),
            Error::Io { .. }
                | Error::Csv(_)
                | Error::MissingColumn(_)
                | Error::NonNumericCell { .. }
                | Error::InvalidBinary { .. }
                | Error::InvalidTime { .. }
                | Error::EmptyDataset
                | Error::MissingCovariate(_)
        )
    }
}
