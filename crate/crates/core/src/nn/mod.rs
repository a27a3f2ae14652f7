//! Minimal dense autodiff: 3×3×3 convolution, linear, ReLU, concatenation,
//! subtraction and the reductions needed for an MSE loss, plus Adam/SGD.

pub mod checkpoint;
mod gemm;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::NdTensor;
