//! Low-rank autoencoder (LoRAE).
//!
//! A deterministic autoencoder whose encoder and decoder are joined by a
//! trainable square matrix `M`. The training objective adds `λ‖M‖_*` (nuclear
//! norm) to the reconstruction error, which drives the latent space towards a
//! low-rank subspace. At inference time `M` is folded into the encoder.
//!
//! Modules, bottom-up:
//!
//! * [`tensor`] - dense tensors and a reverse-mode autodiff tape.
//! * [`linalg`] - Jacobi SVD / symmetric eigensolver, nuclear norm, Cholesky.
//! * [`model`] - encoder / bottleneck / decoder, the batch loss and checkpoints.
//! * [`optim`] - the un-bias-corrected ADAM recurrence and the training loop.
//! * [`data`] - IDX parsing, 28→32 resize, synthetic low-rank fixtures.
//! * [`latent`] - latent spectrum, numerical rank, min-max distance ratio.
//! * [`generative`] - MVG / GMM latent samplers, interpolation, proxy FID.
//! * [`probe`] - frozen-encoder classification probe.
//! * [`experiments`] - λ-sweep, convergence check, generation and probe runs.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod experiments;
pub mod generative;
pub mod latent;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod tensor;

pub use error::{LoraeError, Result};
pub use linalg::Matrix;
