//! Latent-identifiable variational autoencoders built from input-convex
//! Brenier maps, with posterior-collapse diagnostics and exact-inference
//! reference models.

pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod diffcore;
pub mod error;
pub mod icnn;
pub mod inference;
pub mod models;
pub mod oracles;
pub mod cli;

pub use error::{Error, Result};
