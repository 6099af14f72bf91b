use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed descriptor: {0}")]
    Malformed(String),

    #[error("empty layer list")]
    EmptyModel,

    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("platform: {0}")]
    Platform(String),

    #[error("syntax error at column {column}: {message}")]
    Syntax { column: usize, message: String },

    #[error("{0}")]
    Sketch(String),

    #[error("insufficient PEs: {ces} CEs need at least one PE each, platform has {pes}")]
    InsufficientPes { ces: usize, pes: u64 },

    #[error("cannot allocate minimum working set: needs {needed} bytes, on-chip budget is {budget} bytes")]
    Infeasible { needed: u64, budget: u64 },

    #[error("simulation cap exceeded: {macs} MACs > cap {cap}")]
    SimCap { macs: u64, cap: u64 },

    #[error("{0}")]
    Config(String),
}

impl Error {
    pub(crate) fn layer(layer: usize, message: impl Into<String>) -> Self {
        Error::Layer {
            layer,
            message: message.into(),
        }
    }

    /// True for errors caused by a design that does not fit the platform, as
    /// opposed to malformed input.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Infeasible { .. } | Error::InsufficientPes { .. })
    }
}
