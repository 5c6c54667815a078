//! Streaming conditional video-to-video generation on a toy effect world.
//!
//! A bidirectional rectified-flow teacher is adapted into a block-causal
//! student, then distilled on its own rollouts into a few-step generator that
//! streams chunk by chunk against a key/value cache.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod flow;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod server;
pub mod stream;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
