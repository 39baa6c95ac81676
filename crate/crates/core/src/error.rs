use std::path::PathBuf;

use thiserror::Error;

use crate::blermodel::Mcs;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown MCS index {0}")]
    UnknownMcs(Mcs),

    #[error("no BLER entry for MCS {0}")]
    NoBlerEntry(Mcs),

    #[error("invalid table: {0}")]
    InvalidTable(String),

    #[error("sigmoid fit failed: {0}")]
    Fit(String),

    #[error("query at slot {slot} outside spline span [{first}, {last}]")]
    Extrapolation { slot: f64, first: f64, last: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
