//! Two-stage introspective inference.
//!
//! A dense sensing network produces logits; the gradient of a loss against
//! every class with respect to its final-layer weights is extracted in one
//! pass and fed to a second-stage MLP that makes the final prediction.

pub mod active;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fit;
pub mod hashing;
pub mod head;
pub mod introspection;
pub mod metrics;
pub mod nn;
pub mod ood;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
