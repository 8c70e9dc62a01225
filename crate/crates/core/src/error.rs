use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("alignment infeasible: {0}")]
    AlignmentInfeasible(String),
    #[error("length mismatch: {what} has {got} frames but {expected} were expected")]
    LengthMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("CTC target of length {target_len} needs at least {required} frames, got {frames}")]
    CtcInfeasible {
        frames: usize,
        target_len: usize,
        required: usize,
    },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("malformed {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },
    #[error("checkpoint mapping gap, unmapped parameters: {0:?}")]
    MappingGap(Vec<String>),
    #[error("config hash mismatch: {0}")]
    HashMismatch(String),
    #[error(transparent)]
    Tensor(#[from] avsr_autograd::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn format(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }
}
