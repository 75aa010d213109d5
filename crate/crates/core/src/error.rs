use thiserror::Error;

/// Errors produced by the qfair library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("invalid {what} label {value} at row {row} (expected 0 or 1)")]
    InvalidLabel {
        what: &'static str,
        row: usize,
        value: u8,
    },
    #[error("{0} labels are required but absent")]
    MissingLabels(&'static str),
    #[error("feature matrix must have at least one row and one column")]
    EmptyMatrix,
    #[error("dimension mismatch: model expects {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("only one class present in {0} labels")]
    SingleClass(&'static str),
    #[error("sample is empty")]
    EmptySample,
    #[error("cannot cross-validate: {0}")]
    FoldDegeneracy(String),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unparseable cell at line {line}, column `{column}`: {value:?}")]
    UnparseableCell {
        line: usize,
        column: String,
        value: String,
    },
    #[error("no rows left after filtering")]
    EmptyAfterFiltering,
    #[error("unseen category {value:?} in column `{column}`")]
    UnseenCategory { column: String, value: String },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("method {0} does not support this operation")]
    NotApplicable(String),
    #[error("quantifier is missing HDy validation distributions")]
    MissingValidation,
    #[error("auxiliary branch {0} lacks one of the sensitive classes")]
    BranchDegeneracy(&'static str),
    #[error("sensitive group {0} is empty")]
    EmptyGroup(u8),
    #[error("stratum (s={s}, y={y}) has {count} instances, need at least {needed}")]
    CellTooSmall {
        s: u8,
        y: u8,
        count: usize,
        needed: usize,
    },
    #[error("cannot sample {needed} instances from an empty pool")]
    EmptyPool { needed: usize },
    #[error("invalid protocol spec: {0}")]
    InvalidProtocol(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("CSV error: {0}")]
    Csv(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Csv(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
