//! Self-attention residual convolutional classifier, built from first
//! principles: dense tensors, a reverse-mode tape, the full layer stack
//! (conv, residual blocks, spatial self-attention, pooling, linear head),
//! class-weighted Adam training, image ingestion, and bit-exact
//! checkpointing. No external numeric framework — every kernel in this
//! crate is checked against an independent oracle or finite differences.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_ctsar_cnn, Model};
pub use tape::{Gradient, Tape, Var};
pub use tensor::{Scalar, Tensor};
