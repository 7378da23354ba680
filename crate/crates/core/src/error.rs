//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, XragError>;

#[derive(Error, Debug)]
pub enum XragError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error in {path}: {detail}")]
    Csv { path: String, detail: String },

    #[error("column {column} not found in {path}")]
    ColumnNotFound { path: String, column: String },

    #[error("unparsable cell at line {line}, column {column} of {path}: {cell:?}")]
    UnparsableCell {
        path: String,
        line: usize,
        column: String,
        cell: String,
    },

    #[error("series {source_id} too short: {len} samples, need at least {needed}")]
    SeriesTooShort {
        source_id: String,
        len: usize,
        needed: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("window length mismatch: expected (T={expected_t}, L={expected_l}), got (T={got_t}, L={got_l})")]
    WindowLengthMismatch {
        expected_t: usize,
        expected_l: usize,
        got_t: usize,
        got_l: usize,
    },

    #[error("vector length mismatch: {expected} vs {got} in {context}")]
    LengthMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("k = {k} exceeds the {admissible} admissible knowledge-base entries")]
    KTooLarge { k: usize, admissible: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("loss must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("value id {id} does not belong to this tape (len {len})")]
    InvalidTapeRef { id: usize, len: usize },

    #[error("bad file magic in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: &'static str },

    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    BadVersion {
        path: String,
        found: u32,
        supported: u32,
    },

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: String, detail: String },

    #[error("gradient/parameter set mismatch: {detail}")]
    GradParamMismatch { detail: String },

    #[error("{0}")]
    Other(String),
}
