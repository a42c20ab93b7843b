//! BEFUnet: a dual-branch (edge + body) encoder segmentation network built
//! on a small reverse-mode autodiff engine.
//!
//! The edge branch stacks pixel-difference convolution blocks; the body
//! branch is a Swin-style windowed transformer. Per-stage features are fused
//! by local cross-attention, the shallowest and deepest fused levels are
//! fused again through class-token cross-attention, and a U-shaped decoder
//! produces per-pixel class logits.

pub mod autodiff;
pub mod body;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dlf;
pub mod edge;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod lcaf;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, OpCounter, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
