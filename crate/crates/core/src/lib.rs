//! Differentiable odd-even sorting networks and the group ordering
//! constraint (GroCo) loss for self-supervised representation learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`sortcore`]: hard and relaxed odd-even sorting networks and their
//!   permutation matrices.
//! - [`diffgrad`]: a small reverse-mode tape plus central-difference
//!   gradient checking.
//! - [`losses`]: GroCo, full sorting supervision, InfoNCE and triplet losses,
//!   each available as a plain `f64` evaluation and as a tape recording.
//! - [`batchpipe`]: turns a batch of projected views into per-anchor
//!   positive/negative distance groups and averages the per-anchor loss.
//! - [`model`]: MLP encoder and projection head, SGD with momentum, the
//!   warmup + cosine learning-rate schedule, checkpoints.
//! - [`evals`]: weighted k-NN, linear probe and the five-variable toy
//!   optimisation experiment.
//! - [`dataio`]: synthetic clustered data, view augmentation, the GVEC
//!   binary format and metrics CSV.
//! - [`train`]: the training loop tying the above together.
//! - [`par`]: data-parallel helpers with a sequential fallback when the
//!   `parallel` feature is disabled.

pub mod batchpipe;
pub mod cli;
pub mod dataio;
pub mod diffgrad;
pub mod error;
pub mod evals;
pub mod losses;
pub mod model;
pub mod par;
pub mod sortcore;
pub mod train;

pub use error::{GrocoError, Result};
