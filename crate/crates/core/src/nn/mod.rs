//! Tensors, a small tape-based autodiff, the network layers and Adam.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{check_graph_fn, finite_difference_check, relative_error};
pub use graph::{BatchStats, Gradients, Graph, NormStats, Var};
pub use layers::{BatchNorm, Conv2d, Encoder, Linear, Mode, ModelConfig, NetOutput, Network, Projector, ResidualBlock};
pub use tensor::{Real, Tensor};
