use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path} at record {record}: {reason}")]
    Format {
        path: PathBuf,
        record: usize,
        reason: String,
    },

    #[error("missing file referenced by {referenced_by}: {file}")]
    MissingFile { file: String, referenced_by: PathBuf },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("fingerprint mismatch for {what}: expected {expected}, got {actual}")]
    FingerprintMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("corrupted payload {path}: expected {expected} bytes, found {actual}")]
    PayloadLength {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("metadata validation failed for {path}: {reason}")]
    Metadata { path: PathBuf, reason: String },

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("all {0} restarts aborted with non-finite objectives")]
    AllRestartsAborted(usize),

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("missing {artifact} artifact; run stage `{stage}` first")]
    MissingArtifact { artifact: String, stage: String },

    #[error("run directory {0} is locked by another orchestration")]
    Locked(PathBuf),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
