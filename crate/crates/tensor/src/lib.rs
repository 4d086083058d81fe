//! Minimal dense tensor engine for small convolutional networks: 3x3
//! convolution and transposed convolution, batchnorm, pooling, a
//! reverse-mode autodiff graph, and AdamW.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NormMode, Var};
pub use kernels::BatchStats;
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamKind, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
