use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A network configuration row failed validation.
    #[error("config row `{row}`: {detail}")]
    Config { row: String, detail: String },

    #[error("non-finite value {value} at {location}")]
    NonFinite { location: String, value: f64 },

    /// Training produced a non-finite loss.
    #[error("numerical divergence at iteration {iteration} (loss = {loss})")]
    Divergence { iteration: usize, loss: f64 },

    /// A binary file was malformed.
    #[error("corrupt data at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("protocol violation at sequence {sequence}: {detail}")]
    Protocol { sequence: usize, detail: String },

    #[error("io: {0}")]
    Io(#[from] io::Error),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("plot: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(row: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            row: row.into(),
            detail: detail.into(),
        }
    }
}
