use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("config error on `{key}`{}: {message}", line_suffix(*line))]
    Config {
        key: String,
        line: usize,
        message: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("divergence at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            line,
            message: message.into(),
        }
    }
}

/// Overrides carry line 0 and have no position to report.
fn line_suffix(line: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!(" (line {line})")
    }
}
