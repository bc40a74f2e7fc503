use pflow_tensor::{ContainerError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("wav {path}: {msg}")]
    Wav { path: String, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("input too short: {what} needs at least {need} samples, got {got}")]
    TooShort { what: &'static str, need: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{0} is undefined for an all-zero signal")]
    Silent(&'static str),
    #[error("score set needs both target and nontarget trials")]
    SingleClass,
    #[error("missing audio for {0}")]
    MissingAudio(String),
    #[error("malformed {what}: {msg}")]
    Parse { what: String, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}
