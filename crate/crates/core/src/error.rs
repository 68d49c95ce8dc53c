use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: norm {norm:e} is too small to normalize")]
    DegenerateVector { norm: f64 },

    #[error("non-finite value at position {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("no candidates left to rank")]
    EmptyGallery,

    #[error("client unavailable: {0}")]
    ClientUnavailable(String),

    #[error("model returned empty output: {0}")]
    EmptyModelOutput(String),

    #[error("task `{0}` is not supported here")]
    UnsupportedTask(String),

    #[error("mode `{mode}` is missing required input `{input}`")]
    ModeInputMissing { mode: String, input: &'static str },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid k: {0}")]
    InvalidK(usize),

    #[error("no records to evaluate")]
    EmptyEval,

    #[error("record `{0}` has no subset ranking")]
    MissingSubset(String),

    #[error("parse error in {source_name} at line {line}, column {column}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("integrity error: unresolved or invalid ids [{}]", .ids.join(", "))]
    Integrity { ids: Vec<String> },

    #[error("template `{id}` checksum mismatch: manifest {expected}, file {actual}")]
    ChecksumMismatch {
        id: String,
        expected: String,
        actual: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(source_name: impl Into<String>, err: &serde_json::Error) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    pub(crate) fn parse_at_line(
        source_name: impl Into<String>,
        line: usize,
        err: &serde_json::Error,
    ) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            column: err.column(),
            message: err.to_string(),
        }
    }
}
