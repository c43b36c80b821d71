use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: field `{field}`: {msg}")]
    Manifest { file: PathBuf, field: String, msg: String },

    #[error("unknown category id {id} referenced by {context}")]
    UnknownCategory { id: usize, context: String },

    #[error("image {image_id}: {msg}")]
    Image { image_id: String, msg: String },

    #[error("cannot generate image {image_id}: {msg}")]
    Generation { image_id: String, msg: String },

    #[error("no candidate boxes for image")]
    EmptyCandidates,

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("numeric abort in {stage} (iteration {iteration}): {detail}")]
    NumericAbort { stage: String, iteration: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("artifact mismatch: {0}")]
    Mismatch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), msg: msg.into() }
    }
}
