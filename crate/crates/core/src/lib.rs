//! Representative-graph sparse attention and its dense non-local baseline.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: NCHW tensors, matrices, seeded randomness, tensor files.
//! * [`autograd`]: a dynamic tape with reverse-mode gradients and a
//!   central-difference checker.
//! * [`ops`]: 1×1 projection, softmax, bilinear sampling, pooling, ReLU,
//!   batch norm, concatenation, cross-entropy.
//! * [`nonlocal`]: the dense non-local block.
//! * [`repgraph`]: offset regression, representative-node sampling, sparse
//!   attention and the simple / bottleneck layers.
//! * [`variants`]: grid (spatially grouped) and group (channel grouped)
//!   forms of the layer.
//! * [`analysis`]: FLOPs accounting, affinity statistics, benchmarks, the
//!   gradient suite, the dense-equivalence oracle and a toy trainer.

pub mod analysis;
pub mod autograd;
pub mod config;
mod error;
pub mod fusion;
pub mod module;
pub mod nonlocal;
pub mod ops;
pub mod repgraph;
pub mod tensor;
pub mod variants;

pub use error::{Error, Result};
pub use module::Module;
pub use tensor::{DType, Matrix, Rng, Scalar, Shape4, Tensor4};
