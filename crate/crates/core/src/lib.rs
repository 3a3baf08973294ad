//! Joint-aligned optical flow patches for skeleton-based action recognition.
//!
//! The library covers the full desk-scale pipeline: cropping joint-centered
//! patches from video frames, estimating residual TV-L1 flow between
//! temporally aligned patch pairs, packing the flow patches into a
//! skeleton-like tensor layout, and training a two-stream graph-convolutional
//! classifier (skeleton branch + flow-patch branch) whose scores are fused by
//! linear blending. A synthetic articulated-action generator with analytic
//! ground-truth motion fields provides the verification substrate.

pub mod commands;
pub mod config;
pub mod error;
pub mod flow;
pub mod formats;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod twostream;

pub use error::{Error, Result};
pub use tensor::Tensor;
