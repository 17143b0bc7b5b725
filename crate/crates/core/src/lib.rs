//! Tensors, layers, the wire protocol and model partitioning for a
//! two-device training pipeline.

pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod prng;
pub mod stage;
pub mod tensor;
pub mod trace;
pub mod verify;
pub mod wire;

pub use graph::{CostModel, LinkModel, ModelGraph, PartitionSpec};
pub use layers::{LayerKind, LayerSpec, Mode};
pub use prng::{Prng, StreamKey};
pub use stage::{GradAccumulator, Stage, StageCtx};
pub use tensor::{DType, Storage, Tensor, TensorError};
