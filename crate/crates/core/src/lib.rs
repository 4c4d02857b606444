//! Convolutional sparse coding layers with a learnable sparsity weight.
//!
//! Each layer models its input signal `X` as `X = D * Z` for a convolutional
//! dictionary `D` and a sparse code `Z`, and computes `Z` by a fixed number of
//! unrolled FISTA iterations of
//!
//! ```text
//! Z* = argmin_Z  lambda * ||Z||_1  +  1/2 * ||X - D * Z||_2^2
//! ```
//!
//! Because the iteration count is fixed, the solve is an ordinary
//! differentiable computation graph: gradients flow to the dictionary, to the
//! layer input, and to the trade-off weight `lambda` itself, so every layer
//! learns how aggressively to compress its input. Training maximizes the
//! layer-wise sparsity weights alongside the classification objective
//! (cross-entropy minus `beta * ||lambda||_2`), and a small test-time
//! procedure re-learns the lambda vector and batch-norm statistics on a
//! handful of corrupted samples while all weights stay frozen.
//!
//! Module map:
//! - [`tensor`]: rank-4 `f64` arrays and finiteness checks.
//! - [`dict`]: the convolutional dictionary operator pair (synthesis /
//!   analysis) and its Lipschitz constant via power iteration.
//! - [`fista`]: soft threshold, momentum sequence, and the unrolled solver.
//! - [`grad`]: exact derivatives through the unrolled solve (reverse mode for
//!   training, forward mode in `lambda` as an independent cross-check).
//! - [`nn`]: batch norm, layers, residual blocks, presets, and hand-derived
//!   backpropagation for the whole network.
//! - [`train`]: the excitation loss, lambda projection, SGD with Nesterov
//!   momentum, cosine schedule, and the epoch loop.
//! - [`adapt`]: test-time sparsity correction and BN recalibration.
//! - [`data`]: CIFAR binary ingestion, the synthetic sparse-dictionary
//!   dataset, Gaussian corruption, and normalization.
//! - [`checkpoint`]: the self-describing container format for models and
//!   datasets.

pub mod adapt;
pub mod checkpoint;
pub mod data;
pub mod dict;
pub mod error;
pub mod fista;
pub mod grad;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor4;
