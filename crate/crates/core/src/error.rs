use std::path::PathBuf;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("load error in {source_name} at record {line}: {message}")]
    Load {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("split error: {0}")]
    Split(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("encoder adapter error: {0}")]
    Adapter(String),

    #[error("knowledge error for relation {relation}: {message}")]
    Knowledge { relation: String, message: String },

    #[error("relevance filter error: {0}")]
    Filter(String),

    #[error("cause detection error: {0}")]
    CauseDetection(String),

    #[error("numeric error in stage `{stage}`: {message}")]
    Numeric { stage: String, message: String },

    #[error("retrieval error: {0}")]
    Retrieval(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("missing artifact {}: run `prccf {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(stage: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
            message: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
