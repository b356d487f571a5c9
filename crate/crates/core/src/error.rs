use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("unknown degradation kind: {0}")]
    UnknownKind(String),
    #[error("parameter out of range for {kind}: {detail}")]
    ParamOutOfRange { kind: String, detail: String },
    #[error("duplicate degradation kind in composition: {0}")]
    DuplicateKind(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("unknown encoder backend: {0}")]
    UnknownBackend(String),
    #[error("missing weights for pretrained backend: {0}")]
    MissingWeights(String),
    #[error("label {label} out of range [0, {n})")]
    LabelOutOfRange { label: usize, n: usize },
    #[error("k={k} out of range [1, {n}]")]
    KOutOfRange { k: usize, n: usize },
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("training diverged (non-finite loss) at step {step}")]
    Divergence { step: usize },
    #[error("experts already initialized on this network")]
    ExpertsAlreadyPresent,
    #[error("expert index {index} out of range [0, {n})")]
    ExpertIndexOutOfRange { index: usize, n: usize },
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt checkpoint index: {0}")]
    CorruptIndex(String),
    #[error("stage-1 weights drifted during fine-tuning: {0}")]
    ChecksumMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("split fractions {0:?} do not sum to 1")]
    BadSplit(Vec<f64>),
    #[error("router n={router_n} does not match checkpoint n={ckpt_n}")]
    RouterCheckpointMismatch { router_n: usize, ckpt_n: usize },
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Image(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
