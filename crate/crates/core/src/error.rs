use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("length mismatch: expected {expected} values, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("autodiff graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate vector: row {row} has norm {norm:e} (representation collapse)")]
    DegenerateVector { row: usize, norm: f64 },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("corrupt record {index}: {detail}")]
    CorruptRecord { index: usize, detail: String },

    #[error("the unlabeled split carries no labels")]
    UnlabeledSplit,

    #[error("label error: {0}")]
    Label(String),

    #[error("undefined input: {0}")]
    UndefinedInput(String),

    #[error("no class has both positive and negative targets; AUC is not computable")]
    NoComputableAuc,

    #[error("schedule exhausted: step {step} exceeds total {total}")]
    ScheduleExhausted { step: usize, total: usize },

    #[error("incomplete backward: parameter `{0}` has no gradient")]
    IncompleteBackward(String),

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("corrupted checkpoint: {0}")]
    Corruption(String),

    #[error("training collapsed at epoch {epoch}, step {step}: {source}")]
    Collapse {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
