use thiserror::Error;

/// Error type shared by every module of the toolkit.
#[derive(Debug, Error)]
pub enum TxError {
    #[error("input shape error: {0}")]
    InputShape(String),

    #[error("trace error: {0}")]
    Trace(String),

    #[error("selector error: {0}")]
    Selector(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape placement saturated: {0}")]
    Saturation(String),

    #[error("degenerate map: {0}")]
    DegenerateMap(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("quality gate failed: {0}")]
    GateFailure(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TxError>;
