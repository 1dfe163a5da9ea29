use thiserror::Error;

pub type Result<T, E = AtvError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AtvError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty-calibration: {0}")]
    EmptyCalibration(String),

    #[error("empty-pathway-calibration: {0}")]
    EmptyPathwayCalibration(String),

    #[error("abs-requires-text: sample `{0}` has no text tokens")]
    AbsRequiresText(String),

    #[error("missing saliency profile for block {0}")]
    MissingSaliency(usize),

    #[error("mask mismatch: {0}")]
    MaskMismatch(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("bad-magic: expected `ATVC`, found {0:?}")]
    BadMagic([u8; 4]),

    #[error("bad-version: unsupported checkpoint version {0}")]
    BadVersion(u32),

    #[error("truncated-payload: {0}")]
    TruncatedPayload(String),

    #[error("malformed checkpoint header: {0}")]
    BadHeader(String),

    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl AtvError {
    /// True for configuration/data validation failures (as opposed to I/O or
    /// an empty calibration pool).
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            AtvError::Io(_) | AtvError::EmptyCalibration(_) | AtvError::EmptyPathwayCalibration(_)
        )
    }
}
