use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("value {0} is not on this tape")]
    UnknownValue(usize),

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("{kind} adapter is not linear in its input and cannot be merged")]
    NotMergeable { kind: &'static str },

    #[error("adapter is already merged")]
    AlreadyMerged,

    #[error("adapter is not merged")]
    NotMerged,

    #[error("adaptation buffer is empty")]
    EmptyBuffer,

    #[error("base model must be frozen for this operation")]
    ModelNotFrozen,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown owner {owner} (users: {users})")]
    UnknownOwner { owner: usize, users: usize },

    #[error("offload worker {worker} timed out")]
    Timeout { worker: usize },

    #[error("offload runtime: {0}")]
    Offload(String),

    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("bad checkpoint magic {found:?}")]
    BadCheckpointMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint dtype {found} does not match requested {expected}")]
    DTypeMismatch { expected: &'static str, found: String },

    #[error("truncated input while reading {0}")]
    Truncated(&'static str),

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
