//! Question-aware vision transformer at desk scale.
//!
//! A frozen patch-embedding ViT is conditioned on a tokenized question by
//! projecting encoded text into selected self-attention layers and blending
//! the result through a zero-initialized tanh-gated parallel projection.
//! The crate also carries the synthetic grid-world benchmark, the training
//! loop, the ablation harness, saliency maps, and a bit-exact checkpoint
//! format that make the mechanism measurable end to end.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod head;
pub mod question;
pub mod registry;
pub mod saliency;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Tensor};
