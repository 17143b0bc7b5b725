//! Host pipeline, worker daemon, tool broker and thermal model.

pub mod experiment;
pub mod host;
pub mod schedule;
pub mod serial;
pub mod thermal;
pub mod tools;
pub mod worker;

use thiserror::Error;

use edgepipe_core::graph::GraphError;
use edgepipe_core::layers::LayerError;
use edgepipe_core::trace::TraceError;
use edgepipe_core::wire::{error_code, WireError};
use edgepipe_core::TensorError;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Tool(#[from] tools::ToolError),
    #[error("{0}")]
    Config(String),
    #[error("worker error {code} ({}): {message}", error_code::name(*code))]
    Remote { code: u16, message: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

pub type Result<T> = std::result::Result<T, RuntimeError>;
