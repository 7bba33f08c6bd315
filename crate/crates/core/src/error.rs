use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data in {file}: {detail}")]
    CorruptData { file: String, detail: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("too few segments: {segments} segments for {clusters} clusters")]
    TooFewSegments { segments: usize, clusters: usize },

    #[error("degenerate affinity: row {row} has zero degree")]
    DegenerateAffinity { row: usize },

    #[error("scripted demo for task {task} (seed {seed}) did not finish within {max_steps} steps")]
    ScriptFailure {
        task: String,
        seed: u64,
        max_steps: usize,
    },

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
