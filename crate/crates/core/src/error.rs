use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("target frequency {target} GHz is outside the tuning interval [{lo}, {hi}] GHz")]
    Unreachable { target: f64, lo: f64, hi: f64 },

    #[error("brightness track carries no signal")]
    NoSignal,

    #[error("mixture fit failed: {0}")]
    Fit(String),

    #[error("threshold undefined: {0}")]
    ThresholdUndefined(String),

    #[error("parse error at line {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the filesystem rather than by inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Image { .. })
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::Parse {
            row,
            msg: e.to_string(),
        }
    }
}
