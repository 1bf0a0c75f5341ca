use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] diffcore::Error),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("missing view file {name} in {}", dir.display())]
    MissingView { dir: PathBuf, name: String },

    #[error("truncated data in {}: expected {expected} bytes, found {found}", path.display())]
    Length {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error(
        "checkpoint incompatible: field `{field}` is {found} in file but {expected} in config"
    )]
    Incompatible {
        field: String,
        expected: String,
        found: String,
    },

    #[error("non-finite {term} loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize, term: String },

    #[error("non-finite {term} loss ({source})")]
    NonFiniteTerm {
        term: &'static str,
        source: diffcore::Error,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("JSON error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

pub(crate) fn json_err(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
    let path = path.into();
    move |source| Error::Json { path, source }
}
