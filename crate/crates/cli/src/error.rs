use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] facesim::Error),

    #[error("invalid config `{key}`: {reason}")]
    Config { key: &'static str, reason: String },

    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0} fixture check(s) failed")]
    FixturesFailed(usize),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn config(key: &'static str, reason: impl Into<String>) -> CliError {
    CliError::Config {
        key,
        reason: reason.into(),
    }
}
