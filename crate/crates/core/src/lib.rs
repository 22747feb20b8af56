//! Group loss: differentiable replicator-dynamics label refinement used as a
//! training objective for metric embeddings.

pub mod autograd;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod similarity;
pub mod tensor;

pub use error::{Error, Result};
