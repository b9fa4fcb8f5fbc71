use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("value out of range: {0}")]
    RangeError(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("ground truth required but absent for pair {0}")]
    MissingGroundTruth(String),
    #[error("live capture missing for {0}")]
    MissingLiveCapture(String),
    #[error("image {size}x{size} too small for {scales} scales with window {window}")]
    TooSmallForScales { size: usize, window: usize, scales: usize },
    #[error("empty score set: {0}")]
    EmptyScoreSet(&'static str),
    #[error("metric not applicable to the {0} scenario")]
    ScenarioNotApplicable(String),
    #[error("division by zero blend weight")]
    DivisionDomain,
    #[error("need at least {need} identities, got {got}")]
    InsufficientIdentities { need: usize, got: usize },
    #[error("unknown corruption kind: {0}")]
    UnknownKind(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss weights do not match the {0} pass")]
    WeightsPassMismatch(&'static str),
    #[error("state mismatch: {0}")]
    StateMismatch(String),
    #[error("configuration digest {found} does not match checkpoint digest {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
