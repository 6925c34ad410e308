use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: event at ({x}, {y}) outside {width}x{height} sensor")]
    Bounds {
        line: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },

    #[error("line {line}: polarity must be 1 or -1, got {value}")]
    Polarity { line: usize, value: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("non-finite loss {loss} at iteration {iter} (lr {lr})")]
    NonFinite { iter: usize, lr: f64, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn arg(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
