use std::io;

/// Errors produced anywhere in the alignment pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate atom id {0}")]
    DuplicateAui(String),

    #[error("atom {0} has an empty string")]
    EmptyString(String),

    #[error("unknown atom id {0}")]
    UnknownAui(String),

    #[error("no negative pairs exist: {0}")]
    NoNegatives(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("embedding table: {0}")]
    Embedding(String),

    #[error("encoder {encoder}: {message}")]
    Encoder { encoder: String, message: String },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
