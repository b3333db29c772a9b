//! Training-free merging of two fine-tuned checkpoints that share a backbone.
//!
//! The engine composes a multilingual residual and a multimodal residual
//! around their common base with column-wise weights derived from magnitude
//! and direction deviations, and writes the result back into the multimodal
//! anchor. Classical merging baselines and residual diagnostics share the same
//! load / align / assemble path.

pub mod error;
pub mod baselines;
pub mod diagnostics;
pub mod geometry;
pub mod merge;
pub mod rng;
pub mod salience;
pub mod scope;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};
