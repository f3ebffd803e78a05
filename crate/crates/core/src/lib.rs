//! Alternating selective state-space and Sinkhorn-routed mixture-of-experts
//! language models at desk scale, with exact parameter and FLOP accounting,
//! streaming generation and a small training loop.

pub mod accounting;
pub mod attention;
pub mod autodiff;
pub mod backend;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod mamba;
pub mod model;
pub mod moe;
pub mod param;
pub mod selfcheck;
pub mod sinkhorn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
