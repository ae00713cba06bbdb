use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] kgseq_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("incompatible artifact: {0}")]
    Version(String),
    #[error("unknown {kind} `{name}`; closest: {closest}")]
    Unknown {
        kind: &'static str,
        name: String,
        closest: String,
    },
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("missing artifact {path}; run `{step}` first")]
    Missing { path: PathBuf, step: &'static str },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
