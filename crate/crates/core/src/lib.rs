//! Cross-modal content inference and feature enrichment for cold-start
//! recommendation.
//!
//! The model enriches a collaborative item embedding with a user-conditioned
//! visual feature and a semantic feature inferred from the same content
//! embedding, fused with image annotations that are only needed at training
//! time. Two per-branch controllers rescale the gradients the branches send
//! back into the shared content embedding.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gates;
pub mod grad_reg;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod representations;
pub mod rng;
pub mod scoring;
pub mod semantic_fusion;
pub mod training;

pub use error::{Error, Result};
