use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("weight file: bad magic {found:?}, expected \"TMWT0001\"")]
    BadMagic { found: Vec<u8> },

    #[error("weight file truncated: {0}")]
    Truncated(String),

    #[error("weight file header: {0}")]
    Header(String),

    #[error("weight file layout: {0}")]
    Layout(String),

    #[error("weight file is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("weight file has unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("ppm: {0}")]
    Ppm(String),

    #[error("ppm: unsupported variant {0} (only binary P6 is accepted)")]
    PpmVariant(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
