use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Structural problem in an input file (wrong length, wrong field count).
    #[error("format error in {what}{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Format {
        what: String,
        line: Option<usize>,
        msg: String,
    },

    /// Well-formed input carrying an invalid value.
    #[error("data error in {what}: {msg}")]
    Data { what: String, msg: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("cannot encode an empty voxel set")]
    EmptySample,

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("residual inversion failed: {0}")]
    Inversion(String),

    #[error("patch construction failed: {0}")]
    Construction(String),

    /// Caller violated an operation's input contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn data(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Data {
            what: what.into(),
            msg: msg.into(),
        }
    }
}
