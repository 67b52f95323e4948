use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ColtError>;

#[derive(Debug, Error)]
pub enum ColtError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest missing: {0}")]
    ManifestMissing(PathBuf),

    #[error("corrupt manifest record at line {line}{}: {reason}", sample_id.as_ref().map(|s| format!(" (sample {s})")).unwrap_or_default())]
    CorruptRecord {
        line: usize,
        sample_id: Option<String>,
        reason: String,
    },

    #[error("invalid sample {sample_id}: {reason}")]
    InvalidSample { sample_id: String, reason: String },

    #[error("image error for {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("task {0} has no head route")]
    UnknownTask(usize),

    #[error("task {0} is already routed")]
    AlreadyRouted(usize),

    #[error("head {head} does not exist ({count} heads)")]
    InvalidHead { head: usize, count: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("no rehearsal data in memory")]
    NoRehearsalData,

    #[error("task {0} was already committed to memory")]
    DuplicateCommit(usize),

    #[error("tasks must be trained in order: expected task {expected}, got {got}")]
    OutOfOrder { expected: usize, got: usize },

    #[error("non-finite loss at task {task} epoch {epoch} step {step}: {detail}")]
    NonFiniteLoss {
        task: usize,
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("undefined forgetting ratio for task {0}")]
    UndefinedForgetting(usize),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("empty evaluation set")]
    EmptyEvalSet,

    #[error("frozen model cannot be updated")]
    FrozenModel,

    #[error("{0}")]
    Report(String),
}

impl ColtError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ColtError::Io {
            path: path.into(),
            source,
        }
    }
}
