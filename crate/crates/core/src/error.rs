use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("shape mismatch in {layer}: {message}")]
    Shape { layer: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error ({key}): {message}")]
    Config { key: String, message: String },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn shape(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format_at(location: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
